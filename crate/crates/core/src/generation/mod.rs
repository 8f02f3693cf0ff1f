//! Three-step distillation of an attribute tree from a chat model.
//!
//! Step 1 asks for the dataset's visual attributes. Step 2 continues the
//! same conversation and asks for descriptions of a seed class. Step 3 sends
//! one independent query per remaining class with steps 1 and 2 embedded as
//! an in-context example. Every exchange is appended to an [`LlmTranscript`],
//! which doubles as a replayable fixture (see [`FixtureBackend`]).

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::toa::{default_global_templates, AttributeTree, ToaError};

pub mod backend;
pub mod parse;
pub mod prompts;

pub use backend::{BackendError, CachedBackend, ChatMessage, FixtureBackend, LlmBackend, Reply, Role};
use parse::{parse_attributes, parse_descriptions, ATTRIBUTE_LIMIT};

#[derive(Debug, thiserror::Error)]
pub enum GenerationError {
    #[error("invalid job: {0}")]
    Job(String),
    #[error("step {step}{}: {source}", class_suffix(.class))]
    Backend { step: u8, class: Option<String>, source: BackendError },
    #[error("attribute-count: {count} attributes returned, fewer than {ATTRIBUTE_LIMIT} required")]
    AttributeCount { count: usize },
    #[error("unparsable step {step} response")]
    Unparsable { step: u8 },
    #[error("step {step} for `{class}` rejected after {attempts} attempts: {}", .problems.join("; "))]
    Rejected { step: u8, class: String, attempts: usize, problems: Vec<String> },
    #[error("{} classes failed: {}", .failures.len(), list_failures(.failures))]
    Classes { failures: Vec<(String, String)> },
    #[error(transparent)]
    Toa(#[from] ToaError),
    #[error("transcript order: step {step} recorded after step 3")]
    TranscriptOrder { step: u8 },
}

fn class_suffix(class: &Option<String>) -> String {
    class.as_ref().map(|c| format!(" (`{c}`)")).unwrap_or_default()
}

fn list_failures(f: &[(String, String)]) -> String {
    f.iter().map(|(c, m)| format!("`{c}`: {m}")).collect::<Vec<_>>().join("; ")
}

impl GenerationError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            Self::Job(_) => "bad-job",
            Self::Backend { .. } => "backend",
            Self::AttributeCount { .. } => "attribute-count",
            Self::Unparsable { .. } => "unparsable",
            Self::Rejected { problems, .. } => {
                if problems.iter().any(|p| p.starts_with("attribute-coverage")) {
                    "attribute-coverage"
                } else {
                    "grammar"
                }
            }
            Self::Classes { .. } => "classes",
            Self::Toa(_) => "invalid-tree",
            Self::TranscriptOrder { .. } => "transcript-order",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    /// Sampling temperature handed to live backends.
    pub temperature: f64,
    /// Follow-up requests allowed after a malformed step 2 or 3 response.
    pub max_reprompts: usize,
    /// Upper bound on concurrent step-3 queries.
    pub max_concurrency: usize,
    pub global_context_templates: Vec<String>,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self { temperature: 0.0, max_reprompts: 2, max_concurrency: 4, global_context_templates: default_global_templates() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationJob {
    pub dataset_name: String,
    pub dataset_description: String,
    pub class_names: Vec<String>,
    pub llm_backend_id: String,
    pub seed_class: String,
    pub config: GenerationConfig,
}

impl GenerationJob {
    /// Picks the seed class uniformly with `seed`.
    pub fn new(
        dataset_name: &str,
        dataset_description: &str,
        class_names: Vec<String>,
        llm_backend_id: &str,
        seed: u64,
        config: GenerationConfig,
    ) -> Result<Self, GenerationError> {
        let seed_class = class_names
            .choose(&mut ChaCha8Rng::seed_from_u64(seed))
            .cloned()
            .ok_or_else(|| GenerationError::Job("no classes".into()))?;
        let job = Self {
            dataset_name: dataset_name.to_string(),
            dataset_description: dataset_description.to_string(),
            class_names,
            llm_backend_id: llm_backend_id.to_string(),
            seed_class,
            config,
        };
        job.validate()?;
        Ok(job)
    }

    pub fn validate(&self) -> Result<(), GenerationError> {
        if self.class_names.is_empty() {
            return Err(GenerationError::Job("no classes".into()));
        }
        if !self.class_names.contains(&self.seed_class) {
            return Err(GenerationError::Job(format!("seed class `{}` is not in the class list", self.seed_class)));
        }
        if self.dataset_name.trim().is_empty() {
            return Err(GenerationError::Job("empty dataset name".into()));
        }
        if self.config.max_concurrency == 0 {
            return Err(GenerationError::Job("max_concurrency must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub step: u8,
    pub class: Option<String>,
    pub attempt: usize,
    pub prompt: Vec<ChatMessage>,
    pub response: String,
    pub timestamp: u64,
    pub backend_id: String,
}

/// Append-only log of every exchange; steps 1 and 2 precede step 3.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmTranscript {
    pub records: Vec<TranscriptRecord>,
}

impl LlmTranscript {
    pub fn append(&mut self, record: TranscriptRecord) -> Result<(), GenerationError> {
        if record.step < 3 && self.records.iter().any(|r| r.step == 3) {
            return Err(GenerationError::TranscriptOrder { step: record.step });
        }
        self.records.push(record);
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("transcript serializes");
        s.push('\n');
        s
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        if let Some(p) = path.parent() {
            std::fs::create_dir_all(p)?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_json())?;
        std::fs::rename(tmp, path)
    }
}

/// Descriptions of the seed class plus the accepted response text that
/// step 3 embeds verbatim.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Exemplar {
    pub class: String,
    pub descriptions: IndexMap<String, Vec<String>>,
    pub answer: String,
}

pub struct Generator<'a> {
    backend: &'a dyn LlmBackend,
    pub transcript: LlmTranscript,
}

struct Exchange {
    records: Vec<TranscriptRecord>,
    result: Result<(IndexMap<String, Vec<String>>, String), GenerationError>,
}

impl<'a> Generator<'a> {
    pub fn new(backend: &'a dyn LlmBackend) -> Self {
        Self { backend, transcript: LlmTranscript::default() }
    }

    fn check_backend(&self, job: &GenerationJob) -> Result<(), GenerationError> {
        if self.backend.id() != job.llm_backend_id {
            return Err(GenerationError::Job(format!(
                "job names backend `{}` but `{}` is connected",
                job.llm_backend_id,
                self.backend.id()
            )));
        }
        Ok(())
    }

    fn step1_messages(job: &GenerationJob) -> Vec<ChatMessage> {
        vec![ChatMessage::user(prompts::attribute_prompt(&job.dataset_name, &job.dataset_description))]
    }

    pub fn generate_attributes(&mut self, job: &GenerationJob) -> Result<Vec<String>, GenerationError> {
        job.validate()?;
        self.check_backend(job)?;
        let messages = Self::step1_messages(job);
        let reply = self
            .backend
            .send(&messages)
            .map_err(|source| GenerationError::Backend { step: 1, class: None, source })?;
        self.transcript.append(self.record(1, None, 0, messages, &reply))?;
        let attributes = parse_attributes(&reply.text);
        if attributes.is_empty() {
            return Err(GenerationError::Unparsable { step: 1 });
        }
        if attributes.len() >= ATTRIBUTE_LIMIT {
            return Err(GenerationError::AttributeCount { count: attributes.len() });
        }
        Ok(attributes)
    }

    pub fn generate_example(&mut self, job: &GenerationJob, attributes: &[String]) -> Result<Exemplar, GenerationError> {
        job.validate()?;
        self.check_backend(job)?;
        let step1 = self
            .transcript
            .records
            .iter()
            .find(|r| r.step == 1)
            .ok_or_else(|| GenerationError::Job("step 2 needs the step 1 exchange".into()))?;
        let mut messages = step1.prompt.clone();
        messages.push(ChatMessage::assistant(step1.response.clone()));
        messages.push(ChatMessage::user(prompts::example_prompt(&job.dataset_name, &job.seed_class)));
        let ex = converse(self.backend, 2, &job.seed_class, attributes, messages, job.config.max_reprompts);
        for r in ex.records {
            self.transcript.append(r)?;
        }
        let (descriptions, answer) = ex.result?;
        Ok(Exemplar { class: job.seed_class.clone(), descriptions, answer })
    }

    pub fn generate_all_classes(
        &mut self,
        job: &GenerationJob,
        attributes: &[String],
        exemplar: &Exemplar,
    ) -> Result<AttributeTree, GenerationError> {
        job.validate()?;
        self.check_backend(job)?;
        let targets: Vec<&String> = job.class_names.iter().filter(|c| **c != exemplar.class).collect();
        let results: Vec<Mutex<Option<Exchange>>> = targets.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = job.config.max_concurrency.min(targets.len());
        let backend = self.backend;
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(&class) = targets.get(i) else { break };
                    let prompt = prompts::class_prompt(
                        &job.dataset_name,
                        &job.dataset_description,
                        attributes,
                        &exemplar.class,
                        &exemplar.answer,
                        class,
                    );
                    let ex = converse(backend, 3, class, attributes, vec![ChatMessage::user(prompt)], job.config.max_reprompts);
                    *results[i].lock().expect("result slot") = Some(ex);
                });
            }
        });

        let mut per_class: IndexMap<String, IndexMap<String, Vec<String>>> = IndexMap::new();
        let mut failures = Vec::new();
        let mut generated: IndexMap<&String, IndexMap<String, Vec<String>>> = IndexMap::new();
        // Records are appended in class order so the transcript does not
        // depend on thread scheduling.
        for (class, slot) in targets.iter().zip(results) {
            let ex = slot.into_inner().expect("result slot").expect("every class is processed");
            for r in ex.records {
                self.transcript.append(r)?;
            }
            match ex.result {
                Ok((d, _)) => {
                    generated.insert(class, d);
                }
                Err(e) => failures.push(((*class).clone(), e.to_string())),
            }
        }
        if !failures.is_empty() {
            return Err(GenerationError::Classes { failures });
        }
        for class in &job.class_names {
            let d = if *class == exemplar.class {
                exemplar.descriptions.clone()
            } else {
                generated.swap_remove(class).expect("generated above")
            };
            per_class.insert(class.clone(), d);
        }
        let tree = AttributeTree {
            dataset_name: job.dataset_name.clone(),
            attribute_names: attributes.to_vec(),
            global_context_templates: job.config.global_context_templates.clone(),
            per_class,
        };
        tree.ensure_valid()?;
        Ok(tree)
    }

    /// Runs all three steps.
    pub fn run(&mut self, job: &GenerationJob) -> Result<AttributeTree, GenerationError> {
        let attributes = self.generate_attributes(job)?;
        let exemplar = self.generate_example(job, &attributes)?;
        self.generate_all_classes(job, &attributes, &exemplar)
    }

    fn record(&self, step: u8, class: Option<&str>, attempt: usize, prompt: Vec<ChatMessage>, reply: &Reply) -> TranscriptRecord {
        make_record(self.backend.id(), step, class, attempt, prompt, reply)
    }
}

fn make_record(
    backend_id: &str,
    step: u8,
    class: Option<&str>,
    attempt: usize,
    prompt: Vec<ChatMessage>,
    reply: &Reply,
) -> TranscriptRecord {
    TranscriptRecord {
        step,
        class: class.map(str::to_string),
        attempt,
        prompt,
        response: reply.text.clone(),
        timestamp: reply.timestamp,
        backend_id: backend_id.to_string(),
    }
}

/// Sends `messages`, re-prompting with the problems found until the reply
/// parses cleanly or the re-prompt budget is spent.
fn converse(
    backend: &dyn LlmBackend,
    step: u8,
    class: &str,
    attributes: &[String],
    mut messages: Vec<ChatMessage>,
    max_reprompts: usize,
) -> Exchange {
    let mut records = Vec::new();
    let mut problems = Vec::new();
    for attempt in 0..=max_reprompts {
        let reply = match backend.send(&messages) {
            Ok(r) => r,
            Err(source) => {
                let result = Err(GenerationError::Backend { step, class: Some(class.to_string()), source });
                return Exchange { records, result };
            }
        };
        records.push(make_record(backend.id(), step, Some(class), attempt, messages.clone(), &reply));
        let parsed = parse_descriptions(&reply.text, class, attributes);
        if parsed.is_clean() {
            return Exchange { records, result: Ok((parsed.per_attribute, reply.text.trim().to_string())) };
        }
        problems = parsed.messages();
        log::warn!("step {step} `{class}` attempt {attempt}: {}", problems.join("; "));
        messages.push(ChatMessage::assistant(reply.text));
        messages.push(ChatMessage::user(prompts::repair_prompt(&problems)));
    }
    let result = Err(GenerationError::Rejected { step, class: class.to_string(), attempts: max_reprompts + 1, problems });
    Exchange { records, result }
}
