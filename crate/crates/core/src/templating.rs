//! Chat-formatted contexts and target spans for every perplexity the
//! pipeline computes.
//!
//! A [`PromptPlan`] splits a rendered prompt into `context_text` (teacher-forced
//! prefix), `target_text` (the scored span, byte-identical to the corpus field)
//! and `suffix_text` (closing markers, never scored).

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::corpus::Sample;
use crate::digest::sha256_hex;
use crate::error::{Error, Result};

/// Reverse-generation instruction used for PPL(Q|A).
pub const REVERSE_TASK_INSTRUCTION: &str = "TASK: Given an answer, generate the most likely computer science question that this answer is responding to. If the inferred question is outside computer science, respond with \"INVALID\".";

/// Domain-free reverse instruction without the refusal clause.
pub const SIMPLIFIED_TASK_INSTRUCTION: &str =
    "TASK: Given an answer, generate the most likely question that this answer is responding to.";

pub const QUESTION_PREFIX: &str = "Question:";

const ANSWER_LABEL: &str = " Answer: ";

const BUILTIN_FAMILIES: [&str; 2] = [
    include_str!("../templates/deepseek-coder.toml"),
    include_str!("../templates/qwen3.toml"),
];

pub const DEFAULT_FAMILY: &str = "deepseek-coder";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateVariant {
    Standard,
    SimplifiedTask,
    SystemPrefix,
    PrefixOnly,
    PureRaw,
    RawConcat,
}

impl TemplateVariant {
    pub const ALL: [TemplateVariant; 6] = [
        TemplateVariant::Standard,
        TemplateVariant::SimplifiedTask,
        TemplateVariant::SystemPrefix,
        TemplateVariant::PrefixOnly,
        TemplateVariant::PureRaw,
        TemplateVariant::RawConcat,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateVariant::Standard => "standard",
            TemplateVariant::SimplifiedTask => "simplified_task",
            TemplateVariant::SystemPrefix => "system_prefix",
            TemplateVariant::PrefixOnly => "prefix_only",
            TemplateVariant::PureRaw => "pure_raw",
            TemplateVariant::RawConcat => "raw_concat",
        }
    }

    /// Each sensitivity variant replaces the template of exactly the
    /// directions it targets; every other direction keeps the standard one.
    pub fn for_direction(self, direction: Direction) -> TemplateVariant {
        use Direction::*;
        use TemplateVariant::*;
        match (self, direction) {
            (SimplifiedTask, QGivenA) => SimplifiedTask,
            (SystemPrefix | PrefixOnly | PureRaw, QUnconditional) => self,
            (RawConcat, AUnconditional | AGivenQ) => RawConcat,
            _ => Standard,
        }
    }
}

impl fmt::Display for TemplateVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        TemplateVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == norm)
            .ok_or_else(|| Error::Config(format!("unknown template variant `{s}`")))
    }
}

/// Which perplexity a plan feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    /// PPL(Q)
    #[serde(rename = "q")]
    QUnconditional,
    /// PPL(Q|A)
    #[serde(rename = "q_given_a")]
    QGivenA,
    /// PPL(A)
    #[serde(rename = "a")]
    AUnconditional,
    /// PPL(A|Q)
    #[serde(rename = "a_given_q")]
    AGivenQ,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::QUnconditional,
        Direction::QGivenA,
        Direction::AUnconditional,
        Direction::AGivenQ,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::QUnconditional => "q",
            Direction::QGivenA => "q_given_a",
            Direction::AUnconditional => "a",
            Direction::AGivenQ => "a_given_q",
        }
    }

    pub fn scores_query(self) -> bool {
        matches!(self, Direction::QUnconditional | Direction::QGivenA)
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Direction::ALL
            .into_iter()
            .find(|d| d.as_str() == norm)
            .ok_or_else(|| Error::Config(format!("unknown direction `{s}`")))
    }
}

/// Parse a comma-separated direction list such as `q,q_given_a`.
pub fn parse_directions(s: &str) -> Result<Vec<Direction>> {
    let mut out: Vec<Direction> = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    out.sort();
    out.dedup();
    if out.is_empty() {
        return Err(Error::Config("no directions given".into()));
    }
    Ok(out)
}

/// Role markers and system prompt for one model family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyTemplate {
    pub name: String,
    pub system_prompt: String,
    #[serde(default)]
    pub system_open: String,
    #[serde(default)]
    pub system_close: String,
    pub user_open: String,
    pub user_close: String,
    pub assistant_open: String,
    pub assistant_close: String,
    /// Forwarded to backends as `disable_extended_reasoning: true`.
    #[serde(default)]
    pub disable_extended_reasoning: bool,
    #[serde(default)]
    pub request_options: Map<String, Value>,
}

impl FamilyTemplate {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("template file: {e}")))
    }

    fn system_block(&self) -> String {
        format!("{}{}{}", self.system_open, self.system_prompt, self.system_close)
    }

    /// Options a backend request should carry for this family.
    pub fn backend_options(&self) -> Map<String, Value> {
        let mut opts = self.request_options.clone();
        if self.disable_extended_reasoning {
            opts.insert("disable_extended_reasoning".into(), Value::Bool(true));
        }
        opts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptPlan {
    pub sample_id: String,
    pub context_text: String,
    pub target_text: String,
    pub suffix_text: String,
    pub template_variant: TemplateVariant,
    pub direction: Direction,
    pub model_family: String,
}

impl PromptPlan {
    pub fn full_text(&self) -> String {
        format!("{}{}{}", self.context_text, self.target_text, self.suffix_text)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemplateLibrary {
    families: BTreeMap<String, FamilyTemplate>,
    pub reverse_task: String,
    pub simplified_task: String,
    pub question_prefix: String,
}

impl Default for TemplateLibrary {
    fn default() -> Self {
        Self::builtin()
    }
}

impl TemplateLibrary {
    pub fn builtin() -> Self {
        let families = BUILTIN_FAMILIES
            .iter()
            .map(|text| {
                let fam = FamilyTemplate::from_toml(text).expect("shipped template parses");
                (fam.name.clone(), fam)
            })
            .collect();
        TemplateLibrary {
            families,
            reverse_task: REVERSE_TASK_INSTRUCTION.to_owned(),
            simplified_task: SIMPLIFIED_TASK_INSTRUCTION.to_owned(),
            question_prefix: QUESTION_PREFIX.to_owned(),
        }
    }

    /// Built-in families plus every `*.toml` family file in `dir`
    /// (a file overrides a built-in family of the same name).
    pub fn with_dir(dir: &Path) -> Result<Self> {
        let mut lib = Self::builtin();
        let read = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths: Vec<_> = read
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "toml"))
            .collect();
        paths.sort();
        for path in paths {
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let fam = FamilyTemplate::from_toml(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            lib.insert(fam);
        }
        Ok(lib)
    }

    pub fn insert(&mut self, family: FamilyTemplate) {
        self.families.insert(family.name.clone(), family);
    }

    pub fn family(&self, name: &str) -> Result<&FamilyTemplate> {
        self.families.get(name).ok_or_else(|| {
            Error::Config(format!(
                "unknown model family `{name}` (known: {})",
                self.families.keys().cloned().collect::<Vec<_>>().join(", ")
            ))
        })
    }

    pub fn family_names(&self) -> impl Iterator<Item = &str> {
        self.families.keys().map(String::as_str)
    }

    pub fn digest(&self) -> String {
        let fams: Vec<&FamilyTemplate> = self.families.values().collect();
        let bytes = serde_json::to_vec(&(
            fams,
            &self.reverse_task,
            &self.simplified_task,
            &self.question_prefix,
        ))
        .expect("templates serialize");
        sha256_hex(&bytes)
    }

    /// Dispatch to the plan builder for `direction`.
    pub fn plan(
        &self,
        sample: &Sample,
        variant: TemplateVariant,
        family: &str,
        direction: Direction,
    ) -> Result<PromptPlan> {
        match direction {
            Direction::QUnconditional => self.plan_ppl_q(sample, variant, family),
            Direction::QGivenA => self.plan_ppl_q_given_a(sample, variant, family),
            Direction::AUnconditional | Direction::AGivenQ => {
                self.plan_ifd(sample, variant, family, direction)
            }
        }
    }

    /// Context and target for PPL(Q).
    pub fn plan_ppl_q(
        &self,
        sample: &Sample,
        variant: TemplateVariant,
        family: &str,
    ) -> Result<PromptPlan> {
        let fam = self.family(family)?;
        let (context, suffix) = match variant {
            TemplateVariant::Standard => (
                format!("{}{}", fam.system_block(), fam.user_open),
                fam.user_close.clone(),
            ),
            TemplateVariant::SystemPrefix => (format!("{}\n", fam.system_prompt), String::new()),
            TemplateVariant::PrefixOnly => (format!("{}\n", self.question_prefix), String::new()),
            TemplateVariant::PureRaw => (String::new(), String::new()),
            other => return Err(unsupported(other, Direction::QUnconditional)),
        };
        Ok(plan(sample, &sample.query, context, suffix, variant, Direction::QUnconditional, fam))
    }

    /// Reverse-generation framing for PPL(Q|A): the answer sits inside the
    /// user turn and the query is the assistant turn.
    pub fn plan_ppl_q_given_a(
        &self,
        sample: &Sample,
        variant: TemplateVariant,
        family: &str,
    ) -> Result<PromptPlan> {
        let fam = self.family(family)?;
        let instruction = match variant {
            TemplateVariant::Standard => &self.reverse_task,
            TemplateVariant::SimplifiedTask => &self.simplified_task,
            other => return Err(unsupported(other, Direction::QGivenA)),
        };
        let context = format!(
            "{}{}{}{}{}{}{}",
            fam.system_block(),
            fam.user_open,
            instruction,
            ANSWER_LABEL,
            sample.answer,
            fam.user_close,
            fam.assistant_open
        );
        Ok(plan(
            sample,
            &sample.query,
            context,
            fam.assistant_close.clone(),
            variant,
            Direction::QGivenA,
            fam,
        ))
    }

    /// PPL(A) and PPL(A|Q) for the IFD baseline.
    pub fn plan_ifd(
        &self,
        sample: &Sample,
        variant: TemplateVariant,
        family: &str,
        direction: Direction,
    ) -> Result<PromptPlan> {
        let fam = self.family(family)?;
        let (context, suffix) = match (variant, direction) {
            (TemplateVariant::Standard, Direction::AGivenQ) => (
                format!(
                    "{}{}{}{}{}",
                    fam.system_block(),
                    fam.user_open,
                    sample.query,
                    fam.user_close,
                    fam.assistant_open
                ),
                fam.assistant_close.clone(),
            ),
            (TemplateVariant::Standard, Direction::AUnconditional) => (
                format!(
                    "{}{}{}{}",
                    fam.system_block(),
                    fam.user_open,
                    fam.user_close,
                    fam.assistant_open
                ),
                fam.assistant_close.clone(),
            ),
            (TemplateVariant::RawConcat, Direction::AGivenQ) => (sample.query.clone(), String::new()),
            (TemplateVariant::RawConcat, Direction::AUnconditional) => (String::new(), String::new()),
            (v, d) => return Err(unsupported(v, d)),
        };
        Ok(plan(sample, &sample.answer, context, suffix, variant, direction, fam))
    }
}

fn plan(
    sample: &Sample,
    target: &str,
    context_text: String,
    suffix_text: String,
    template_variant: TemplateVariant,
    direction: Direction,
    fam: &FamilyTemplate,
) -> PromptPlan {
    PromptPlan {
        sample_id: sample.id.clone(),
        context_text,
        target_text: target.to_owned(),
        suffix_text,
        template_variant,
        direction,
        model_family: fam.name.clone(),
    }
}

fn unsupported(variant: TemplateVariant, direction: Direction) -> Error {
    Error::Config(format!(
        "template variant `{variant}` does not apply to direction `{direction}`"
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    const DEEPSEEK_SYSTEM: &str = "You are an AI programming assistant, utilizing the Deepseek Coder model, developed by Deepseek Company, and you only answer questions related to computer science. For politically sensitive questions, security and privacy issues, and other non-computer science questions, you will refuse to answer.";

    fn sample(q: &str, a: &str) -> Sample {
        Sample::new("s1", q, a)
    }

    fn lib() -> TemplateLibrary {
        TemplateLibrary::builtin()
    }

    #[test]
    fn standard_ppl_q_carries_family_system_prompt() {
        let p = lib()
            .plan_ppl_q(&sample("sort a list", "sorted(xs)"), TemplateVariant::Standard, "deepseek-coder")
            .unwrap();
        assert!(p
            .context_text
            .contains("You are an AI programming assistant, utilizing the Deepseek Coder model"));
        assert!(p.context_text.contains(DEEPSEEK_SYSTEM));
        assert!(p.context_text.ends_with("### Instruction:\n"));
        assert_eq!(p.target_text, "sort a list");
    }

    #[test]
    fn pure_raw_has_empty_context() {
        for fam in ["deepseek-coder", "qwen3"] {
            let p = lib()
                .plan_ppl_q(&sample("sort a list", "x"), TemplateVariant::PureRaw, fam)
                .unwrap();
            assert_eq!(p.context_text, "");
            assert_eq!(p.suffix_text, "");
        }
    }

    #[test]
    fn prefix_only_and_system_prefix_contexts() {
        let l = lib();
        let s = sample("q", "a");
        let p = l.plan_ppl_q(&s, TemplateVariant::PrefixOnly, "qwen3").unwrap();
        assert_eq!(p.context_text, "Question:\n");
        let p = l.plan_ppl_q(&s, TemplateVariant::SystemPrefix, "deepseek-coder").unwrap();
        assert_eq!(p.context_text, format!("{DEEPSEEK_SYSTEM}\n"));
        assert!(!p.context_text.contains("TASK"));
    }

    #[test]
    fn target_span_is_never_mutated() {
        let s = sample("  sort a list \n", "\tdef f(): pass  ");
        let l = lib();
        for fam in ["deepseek-coder", "qwen3"] {
            for v in TemplateVariant::ALL {
                for d in Direction::ALL {
                    if let Ok(p) = l.plan(&s, v, fam, d) {
                        let expected = if d.scores_query() { &s.query } else { &s.answer };
                        assert_eq!(&p.target_text, expected);
                    }
                }
            }
        }
    }

    #[test]
    fn standard_reverse_task_includes_invalid_clause() {
        let p = lib()
            .plan_ppl_q_given_a(&sample("Q", "A body"), TemplateVariant::Standard, "deepseek-coder")
            .unwrap();
        assert!(p.context_text.contains(
            "If the inferred question is outside computer science, respond with \"INVALID\""
        ));
        assert!(p
            .context_text
            .contains("generate the most likely computer science question"));
        assert!(p.context_text.contains("Answer: A body"));
        assert!(p.context_text.ends_with("### Response:\n"));
        assert_eq!(p.target_text, "Q");
    }

    #[test]
    fn simplified_task_drops_domain_and_refusal() {
        let p = lib()
            .plan_ppl_q_given_a(&sample("Q", "A"), TemplateVariant::SimplifiedTask, "deepseek-coder")
            .unwrap();
        let user_turn = p
            .context_text
            .split("### Instruction:\n")
            .nth(1)
            .unwrap();
        assert!(!user_turn.contains("computer science"));
        assert!(!user_turn.contains("INVALID"));
        assert!(user_turn.starts_with(SIMPLIFIED_TASK_INSTRUCTION));
    }

    #[test]
    fn ifd_plans() {
        let l = lib();
        let s = sample("the query", "the answer");
        let raw = l
            .plan_ifd(&s, TemplateVariant::RawConcat, "qwen3", Direction::AGivenQ)
            .unwrap();
        assert_eq!(raw.context_text, "the query");
        let raw_a = l
            .plan_ifd(&s, TemplateVariant::RawConcat, "qwen3", Direction::AUnconditional)
            .unwrap();
        assert_eq!(raw_a.context_text, "");
        let std_a = l
            .plan_ifd(&s, TemplateVariant::Standard, "qwen3", Direction::AUnconditional)
            .unwrap();
        assert!(std_a
            .context_text
            .ends_with("<|im_start|>user\n<|im_end|>\n<|im_start|>assistant\n<think>\n\n</think>\n\n"));
        assert_eq!(std_a.target_text, "the answer");
        let std_aq = l
            .plan_ifd(&s, TemplateVariant::Standard, "qwen3", Direction::AGivenQ)
            .unwrap();
        assert!(std_aq.context_text.contains("<|im_start|>user\nthe query<|im_end|>\n"));
    }

    #[test]
    fn unsupported_combinations_are_config_errors() {
        let l = lib();
        let s = sample("q", "a");
        assert!(matches!(
            l.plan_ppl_q(&s, TemplateVariant::SimplifiedTask, "qwen3"),
            Err(Error::Config(_))
        ));
        assert!(l.plan_ppl_q_given_a(&s, TemplateVariant::PureRaw, "qwen3").is_err());
        assert!(l
            .plan_ifd(&s, TemplateVariant::PrefixOnly, "qwen3", Direction::AGivenQ)
            .is_err());
        assert!(l
            .plan_ifd(&s, TemplateVariant::Standard, "qwen3", Direction::QGivenA)
            .is_err());
        assert!(l.plan_ppl_q(&s, TemplateVariant::Standard, "llama").is_err());
    }

    #[test]
    fn role_markers_balance_and_target_is_contiguous() {
        let mut l = lib();
        l.insert(FamilyTemplate {
            name: "tagged".into(),
            system_prompt: "SYS".into(),
            system_open: "<s>".into(),
            system_close: "</s>".into(),
            user_open: "<u>".into(),
            user_close: "</u>".into(),
            assistant_open: "<a>".into(),
            assistant_close: "</a>".into(),
            disable_extended_reasoning: false,
            request_options: Map::new(),
        });
        let s = sample("QUERYTEXT", "ANSWERTEXT");
        for d in Direction::ALL {
            let p = l.plan(&s, TemplateVariant::Standard, "tagged", d).unwrap();
            let full = p.full_text();
            for (open, close) in [("<s>", "</s>"), ("<u>", "</u>"), ("<a>", "</a>")] {
                assert_eq!(full.matches(open).count(), full.matches(close).count(), "{d}: {full}");
            }
            let start = p.context_text.len();
            assert_eq!(&full[start..start + p.target_text.len()], p.target_text);
        }
    }

    #[test]
    fn changing_query_changes_only_query_occurrences() {
        let l = lib();
        let a = sample("alpha query", "some answer");
        let b = sample("beta request", "some answer");
        for fam in ["deepseek-coder", "qwen3"] {
            for v in TemplateVariant::ALL {
                for d in Direction::ALL {
                    let (Ok(pa), Ok(pb)) = (l.plan(&a, v, fam, d), l.plan(&b, v, fam, d)) else {
                        continue;
                    };
                    assert_eq!(pa.full_text().replace(&a.query, "\u{0}"), pb.full_text().replace(&b.query, "\u{0}"));
                }
            }
        }
    }

    #[test]
    fn plans_are_pure() {
        let l = lib();
        let s = sample("q", "a");
        assert_eq!(
            l.plan(&s, TemplateVariant::Standard, "qwen3", Direction::QGivenA).unwrap(),
            l.plan(&s, TemplateVariant::Standard, "qwen3", Direction::QGivenA).unwrap()
        );
    }

    #[test]
    fn weak_family_requests_reasoning_off() {
        let l = lib();
        let opts = l.family("qwen3").unwrap().backend_options();
        assert_eq!(opts["disable_extended_reasoning"], Value::Bool(true));
        assert!(l.family("deepseek-coder").unwrap().backend_options().is_empty());
    }

    #[test]
    fn variant_routing_per_direction() {
        use Direction::*;
        use TemplateVariant::*;
        assert_eq!(PureRaw.for_direction(QUnconditional), PureRaw);
        assert_eq!(PureRaw.for_direction(QGivenA), Standard);
        assert_eq!(SimplifiedTask.for_direction(QUnconditional), Standard);
        assert_eq!(SimplifiedTask.for_direction(QGivenA), SimplifiedTask);
        assert_eq!(RawConcat.for_direction(AGivenQ), RawConcat);
        assert_eq!(RawConcat.for_direction(QGivenA), Standard);
    }

    #[test]
    fn parse_names() {
        assert_eq!("pure-raw".parse::<TemplateVariant>().unwrap(), TemplateVariant::PureRaw);
        assert_eq!(
            parse_directions("q_given_a,q").unwrap(),
            vec![Direction::QUnconditional, Direction::QGivenA]
        );
        assert!(parse_directions("").is_err());
    }

    #[test]
    fn family_dir_overrides_builtin() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("qwen3.toml"),
            "name = \"qwen3\"\nsystem_prompt = \"custom\"\nuser_open = \"U:\"\nuser_close = \"\\n\"\nassistant_open = \"A:\"\nassistant_close = \"\\n\"\n",
        )
        .unwrap();
        let l = TemplateLibrary::with_dir(dir.path()).unwrap();
        assert_eq!(l.family("qwen3").unwrap().system_prompt, "custom");
        assert!(l.family("deepseek-coder").is_ok());
        assert_ne!(l.digest(), TemplateLibrary::builtin().digest());
    }
}
