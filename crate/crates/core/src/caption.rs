//! Subgroup-specific caption generation.
//!
//! The VLM is asked to describe the scene's objects without naming any
//! subgroup; whatever subgroup vocabulary slips through is scrubbed, and the
//! target subgroup is then appended as a style sentence.

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::{PhraseTemplate, Subgroup, SubgroupTaxonomy, TaxonomyError};
use crate::palette::{read_mask, MaskError, MaskGrid, Palette};
use crate::rng::fnv1a64;

pub const DEFAULT_STYLE_TEMPLATE: &str = "Image taken in {weather} weather at {time_of_day} time.";

#[derive(Debug, Error)]
pub enum CaptionError {
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("caption is empty")]
    EmptyCaption,
    #[error("class list is empty")]
    NoClasses,
    #[error(transparent)]
    Template(#[from] TaxonomyError),
}

/// Class names present in a mask, deduplicated, in palette order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MaskClassList(pub Vec<String>);

impl MaskClassList {
    pub fn names(&self) -> &[String] {
        &self.0
    }
}

/// Classes with at least one pixel in `grid`, in palette order.
pub fn classes_in_grid(grid: &MaskGrid, palette: &Palette) -> Result<MaskClassList, MaskError> {
    if grid.ids.is_empty() {
        return Err(MaskError::EmptyMask);
    }
    let mut present = vec![false; palette.len()];
    let mut last = None;
    for &id in &grid.ids {
        if last == Some(id) {
            continue;
        }
        last = Some(id);
        let pos = palette
            .position(id)
            .ok_or_else(|| MaskError::UnknownClassValue(id.to_string()))?;
        present[pos] = true;
    }
    Ok(MaskClassList(
        palette
            .classes
            .iter()
            .zip(present)
            .filter(|(_, p)| *p)
            .map(|(c, _)| c.name.clone())
            .collect(),
    ))
}

pub fn extract_classes(mask_path: &Path, palette: &Palette) -> Result<MaskClassList, CaptionError> {
    let grid = read_mask(mask_path, palette)?;
    Ok(classes_in_grid(&grid, palette)?)
}

/// The captioning query: objects from the mask, plus every subgroup phrase
/// in the do-not-mention clause.
pub fn build_vlm_prompt(
    classes: &MaskClassList,
    taxonomy: &SubgroupTaxonomy,
) -> Result<String, CaptionError> {
    if classes.0.is_empty() {
        return Err(CaptionError::NoClasses);
    }
    let objects = classes.0.join(", ");
    let subgroups = taxonomy
        .enumerate()
        .iter()
        .map(|sg| taxonomy.phrase(sg))
        .collect::<Vec<_>>()
        .join("; ");
    Ok(format!(
        "Provide a description of the objects - {objects} - and their relationships with \
         respect to each other. Describe the background of the scene and image quality. \
         Do not mention the subgroups - {subgroups}"
    ))
}

/// Lowercase word forms removed by [`scrub_subgroup_terms`].
pub fn scrub_vocabulary(taxonomy: &SubgroupTaxonomy) -> HashSet<String> {
    let mut forms = HashSet::new();
    for surface in taxonomy.vocabulary() {
        for word in surface
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
        {
            let w = word.to_lowercase();
            forms.insert(format!("{w}s"));
            forms.insert(format!("{w}y"));
            forms.insert(format!("{w}time"));
            if let Some(stem) = w.strip_suffix('y').filter(|s| s.chars().count() >= 4) {
                forms.insert(stem.to_string());
                forms.insert(format!("{stem}s"));
            }
            forms.insert(w);
        }
    }
    forms
}

enum Token<'a> {
    Word(&'a str),
    Gap(&'a str),
}

fn tokenize(text: &str) -> Vec<Token<'_>> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut in_word = None;
    for (i, ch) in text.char_indices() {
        let w = ch.is_alphanumeric();
        match in_word {
            Some(prev) if prev != w => {
                out.push(if prev {
                    Token::Word(&text[start..i])
                } else {
                    Token::Gap(&text[start..i])
                });
                start = i;
            }
            _ => {}
        }
        in_word = Some(w);
    }
    if let Some(prev) = in_word {
        out.push(if prev {
            Token::Word(&text[start..])
        } else {
            Token::Gap(&text[start..])
        });
    }
    out
}

/// Case-insensitive whole-word removal of subgroup vocabulary, including
/// simple inflections ("rainy", "clouds", "nighttime").
pub fn scrub_subgroup_terms(caption: &str, taxonomy: &SubgroupTaxonomy) -> String {
    let forms = scrub_vocabulary(taxonomy);
    let tokens = tokenize(caption);
    let removed: Vec<bool> = tokens
        .iter()
        .map(|t| matches!(t, Token::Word(w) if forms.contains(&w.to_lowercase())))
        .collect();

    let mut joined = String::with_capacity(caption.len());
    for (i, t) in tokens.iter().enumerate() {
        match t {
            Token::Word(w) if !removed[i] => joined.push_str(w),
            Token::Word(_) => joined.push(' '),
            Token::Gap(g) => {
                // "dawn / dusk" leaves a dangling slash
                let slash_only = g.chars().all(|c| c == '/' || c.is_whitespace());
                let near_removed = (i > 0 && removed[i - 1]) || removed.get(i + 1) == Some(&true);
                if slash_only && near_removed {
                    joined.push(' ');
                } else {
                    joined.push_str(g);
                }
            }
        }
    }
    tidy_spacing(&joined)
}

fn tidy_spacing(s: &str) -> String {
    let collapsed = s.split_whitespace().collect::<Vec<_>>().join(" ");
    let mut out = String::with_capacity(collapsed.len());
    for ch in collapsed.chars() {
        if matches!(ch, '.' | ',' | ';' | ':' | '!' | '?') && out.ends_with(' ') {
            out.pop();
        }
        out.push(ch);
    }
    out.trim_start_matches(|c: char| matches!(c, ',' | ';' | ':') || c.is_whitespace())
        .to_string()
}

/// Style sentence renderer for target subgroups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionStyle {
    pub template: PhraseTemplate,
}

impl CaptionStyle {
    pub fn for_taxonomy(taxonomy: &SubgroupTaxonomy) -> Self {
        let mut template =
            PhraseTemplate::for_taxonomy(DEFAULT_STYLE_TEMPLATE, "Image taken in", taxonomy);
        if !template.0.ends_with('.') {
            template.0.push('.');
        }
        Self { template }
    }

    pub fn custom(template: &str, taxonomy: &SubgroupTaxonomy) -> Result<Self, CaptionError> {
        let template = PhraseTemplate::new(template);
        template.check(taxonomy)?;
        Ok(Self { template })
    }

    pub fn sentence(&self, taxonomy: &SubgroupTaxonomy, target: &Subgroup) -> String {
        self.template.render(taxonomy, target)
    }

    /// `caption + " " + style sentence`.
    pub fn compose(
        &self,
        caption: &str,
        taxonomy: &SubgroupTaxonomy,
        target: &Subgroup,
    ) -> Result<String, CaptionError> {
        if caption.trim().is_empty() {
            return Err(CaptionError::EmptyCaption);
        }
        Ok(format!("{caption} {}", self.sentence(taxonomy, target)))
    }
}

/// Append the default style sentence for `target` to `caption`.
pub fn compose_caption(
    caption: &str,
    target: &Subgroup,
    taxonomy: &SubgroupTaxonomy,
) -> Result<String, CaptionError> {
    CaptionStyle::for_taxonomy(taxonomy).compose(caption, taxonomy, target)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionBundle {
    pub prompt: String,
    pub base_caption: String,
    pub styled_caption: Option<String>,
    pub source_subgroup: Subgroup,
    pub target_subgroup: Option<Subgroup>,
}

/// Base captions keyed by (sample id, prompt hash).
#[derive(Debug, Default)]
pub struct CaptionCache {
    entries: Mutex<HashMap<(String, u64), String>>,
}

impl CaptionCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn key(sample_id: &str, prompt: &str) -> (String, u64) {
        (sample_id.to_string(), fnv1a64(prompt.as_bytes()))
    }

    pub fn get(&self, sample_id: &str, prompt: &str) -> Option<String> {
        self.entries
            .lock()
            .expect("cache lock")
            .get(&Self::key(sample_id, prompt))
            .cloned()
    }

    pub fn insert(&self, sample_id: &str, prompt: &str, caption: String) {
        self.entries
            .lock()
            .expect("cache lock")
            .insert(Self::key(sample_id, prompt), caption);
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
