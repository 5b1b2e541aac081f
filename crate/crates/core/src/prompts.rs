//! Class names and text prompts built from WordNet synsets.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::derived_rng;

const BUNDLED_CLIP_TEMPLATES: &str = include_str!("../data/clip_imagenet_templates.txt");
const BUNDLED_SARIYILDIZ_TEMPLATES: &str = include_str!("../data/sariyildiz_templates.txt");

/// Template id reserved for the single-template simple prompts.
pub const SIMPLE_TEMPLATE_ID: u32 = 0;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("stripping whitespace left an empty class name")]
    EmptyResult,
    #[error("invalid synset {wnid}: {reason}")]
    InvalidSynset { wnid: String, reason: String },
    #[error("template file missing: {0}")]
    TemplateFileMissing(String),
    #[error("malformed template file: {0}")]
    BadTemplateFile(String),
    #[error("synset {0} has no hypernym lemmas")]
    MissingHypernym(String),
    #[error("synset {0} has no definition")]
    MissingDefinition(String),
    #[error("background category requested with an empty background list")]
    MissingBackgrounds,
}

/// An ImageNet class as a WordNet synset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSynset {
    pub wnid: String,
    pub lemmas: Vec<String>,
    #[serde(default, alias = "hypernym_lemmas")]
    pub hypernyms: Vec<String>,
    #[serde(default)]
    pub definition: String,
}

impl ClassSynset {
    pub fn new(wnid: &str, lemmas: &[&str]) -> Self {
        Self {
            wnid: wnid.to_string(),
            lemmas: lemmas.iter().map(|s| s.to_string()).collect(),
            hypernyms: Vec::new(),
            definition: String::new(),
        }
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        let invalid = |reason: &str| PromptError::InvalidSynset {
            wnid: self.wnid.clone(),
            reason: reason.to_string(),
        };
        if self.lemmas.is_empty() {
            return Err(invalid("no lemmas"));
        }
        if self.lemmas.iter().any(|l| l.trim().is_empty()) {
            return Err(invalid("blank lemma"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMethod {
    SimplePrompt,
    SimplePromptNoWs,
    ClipPrompt,
    SariyildizPrompt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SariyildizCategory {
    Name,
    Hypernym,
    Multiple,
    Definition,
    Background,
}

impl SariyildizCategory {
    pub const ALL: [SariyildizCategory; 5] = [
        SariyildizCategory::Name,
        SariyildizCategory::Hypernym,
        SariyildizCategory::Multiple,
        SariyildizCategory::Definition,
        SariyildizCategory::Background,
    ];

    fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.label() == s)
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Name => "name",
            Self::Hypernym => "hypernym",
            Self::Multiple => "multiple",
            Self::Definition => "definition",
            Self::Background => "background",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub class_wnid: String,
    pub method: PromptMethod,
    pub template_id: u32,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<SariyildizCategory>,
}

/// Lemmas joined by `", "` in synset order, casing untouched.
pub fn class_name(s: &ClassSynset) -> String {
    s.lemmas.join(", ")
}

/// Removes every Unicode whitespace character.
pub fn strip_whitespace(name: &str) -> Result<String, PromptError> {
    let out: String = name.chars().filter(|c| !c.is_whitespace()).collect();
    if out.is_empty() {
        return Err(PromptError::EmptyResult);
    }
    Ok(out)
}

/// `"A photo of <name>."`, optionally with whitespace stripped from the name.
pub fn simple_prompt(s: &ClassSynset, no_ws: bool) -> Result<PromptSpec, PromptError> {
    s.validate()?;
    let name = class_name(s);
    let (name, method) = if no_ws {
        (strip_whitespace(&name)?, PromptMethod::SimplePromptNoWs)
    } else {
        (name, PromptMethod::SimplePrompt)
    };
    Ok(PromptSpec {
        class_wnid: s.wnid.clone(),
        method,
        template_id: SIMPLE_TEMPLATE_ID,
        text: format!("A photo of {name}."),
        category: None,
    })
}

/// The CLIP ImageNet prompt templates, each with a single `{}` slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClipTemplates {
    templates: Vec<String>,
}

impl ClipTemplates {
    pub fn bundled() -> Self {
        Self::parse(BUNDLED_CLIP_TEMPLATES).expect("bundled CLIP templates are well formed")
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, PromptError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|_| PromptError::TemplateFileMissing(path.display().to_string()))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, PromptError> {
        let templates: Vec<String> = text
            .lines()
            .map(str::trim_end)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(String::from)
            .collect();
        if templates.is_empty() {
            return Err(PromptError::BadTemplateFile("no templates".into()));
        }
        if let Some(t) = templates.iter().find(|t| t.matches("{}").count() != 1) {
            return Err(PromptError::BadTemplateFile(format!("template without exactly one slot: {t}")));
        }
        Ok(Self { templates })
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn get(&self, template_id: u32) -> Option<&str> {
        self.templates.get(template_id as usize).map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.templates.iter().map(String::as_str)
    }

    /// Fills template `template_id` with the whitespace-stripped class name.
    pub fn render(&self, s: &ClassSynset, template_id: u32) -> Result<PromptSpec, PromptError> {
        s.validate()?;
        let template = self
            .get(template_id)
            .ok_or_else(|| PromptError::BadTemplateFile(format!("no template {template_id}")))?;
        let name = strip_whitespace(&class_name(s))?;
        Ok(PromptSpec {
            class_wnid: s.wnid.clone(),
            method: PromptMethod::ClipPrompt,
            template_id,
            text: template.replacen("{}", &name, 1),
            category: None,
        })
    }
}

/// `count` CLIP prompts with templates drawn uniformly with replacement.
pub fn clip_prompts(
    s: &ClassSynset,
    templates: &ClipTemplates,
    count: usize,
    rng_seed: u64,
) -> Result<Vec<PromptSpec>, PromptError> {
    let mut rng = derived_rng(rng_seed, &["clip", &s.wnid]);
    (0..count)
        .map(|_| {
            let id = rng.gen_range(0..templates.len()) as u32;
            templates.render(s, id)
        })
        .collect()
}

pub fn sample_clip_prompt(
    s: &ClassSynset,
    templates: &ClipTemplates,
    rng_seed: u64,
) -> Result<PromptSpec, PromptError> {
    Ok(clip_prompts(s, templates, 1, rng_seed)?.remove(0))
}

/// Category-tagged templates in the style of synthetic ImageNet clones.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SariyildizTemplates {
    entries: Vec<(SariyildizCategory, String)>,
}

impl SariyildizTemplates {
    pub fn bundled() -> Self {
        Self::parse(BUNDLED_SARIYILDIZ_TEMPLATES).expect("bundled templates are well formed")
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, PromptError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|_| PromptError::TemplateFileMissing(path.display().to_string()))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, PromptError> {
        let mut entries = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#')) {
            let (cat, template) = line
                .split_once('\t')
                .ok_or_else(|| PromptError::BadTemplateFile(format!("missing tab: {line}")))?;
            let cat = SariyildizCategory::parse(cat.trim())
                .ok_or_else(|| PromptError::BadTemplateFile(format!("unknown category {cat}")))?;
            entries.push((cat, template.to_string()));
        }
        for cat in SariyildizCategory::ALL {
            if !entries.iter().any(|(c, _)| *c == cat) {
                return Err(PromptError::BadTemplateFile(format!("no template for {}", cat.label())));
            }
        }
        Ok(Self { entries })
    }

    /// `(template_id, template)` pairs of one category.
    pub fn of(&self, cat: SariyildizCategory) -> Vec<(u32, &str)> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, (c, _))| *c == cat)
            .map(|(i, (_, t))| (i as u32, t.as_str()))
            .collect()
    }
}

/// Equal numbers of prompts for each of the five template categories, with
/// templates and backgrounds drawn uniformly with replacement.
pub fn sariyildiz_prompts(
    s: &ClassSynset,
    templates: &SariyildizTemplates,
    backgrounds: &[String],
    per_category: usize,
    rng_seed: u64,
) -> Result<Vec<PromptSpec>, PromptError> {
    s.validate()?;
    let hypernym = s.hypernyms.iter().find(|h| !h.trim().is_empty());
    let definition = s.definition.trim();
    let name = class_name(s);
    let mut out = Vec::with_capacity(per_category * SariyildizCategory::ALL.len());
    for cat in SariyildizCategory::ALL {
        let needs_hypernym = matches!(
            cat,
            SariyildizCategory::Hypernym | SariyildizCategory::Multiple | SariyildizCategory::Background
        );
        if needs_hypernym && hypernym.is_none() {
            return Err(PromptError::MissingHypernym(s.wnid.clone()));
        }
        if cat == SariyildizCategory::Definition && definition.is_empty() {
            return Err(PromptError::MissingDefinition(s.wnid.clone()));
        }
        if cat == SariyildizCategory::Background && backgrounds.is_empty() {
            return Err(PromptError::MissingBackgrounds);
        }
        let choices = templates.of(cat);
        let mut rng = derived_rng(rng_seed, &["sariyildiz", cat.label(), &s.wnid]);
        for _ in 0..per_category {
            let (template_id, template) = choices[rng.gen_range(0..choices.len())];
            let mut text = template.replace("{name}", &name);
            if let Some(h) = hypernym {
                text = text.replace("{hypernym}", h);
            }
            text = text.replace("{definition}", definition);
            if cat == SariyildizCategory::Background {
                let bg = &backgrounds[rng.gen_range(0..backgrounds.len())];
                text = text.replace("{background}", bg);
            }
            out.push(PromptSpec {
                class_wnid: s.wnid.clone(),
                method: PromptMethod::SariyildizPrompt,
                template_id,
                text,
                category: Some(cat),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultiTokenRule {
    Single,
    MeanOfEmbeddings,
}

/// Initialization for a learned pseudo-word: the final word of the first
/// lemma. If the tokenizer splits it into several tokens, consumers average
/// their embeddings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudowordInit {
    pub word: String,
    pub multi_token_rule: MultiTokenRule,
}

pub fn pseudoword_init(s: &ClassSynset) -> Result<PseudowordInit, PromptError> {
    s.validate()?;
    let word = s.lemmas[0]
        .split_whitespace()
        .last()
        .expect("validated lemma is non-blank")
        .to_string();
    Ok(PseudowordInit {
        word,
        multi_token_rule: MultiTokenRule::MeanOfEmbeddings,
    })
}
