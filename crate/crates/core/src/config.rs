//! Run configuration: a flat, commented `key = value` file.
//!
//! Values resolve in three layers: built-in defaults for the task profile,
//! then the file, then command-line overrides.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::calibration::LoopConfig;
use crate::ctr::{CtrConfig, CtrTrainConfig};
use crate::dpo::{DpoConfig, ReferenceMode};
use crate::encoder::EncoderConfig;
use crate::error::{GqsError, Result};
use crate::policy::{PolicyConfig, SftConfig};
use crate::prefs::PairConfig;
use crate::sim::WorldConfig;

/// Suggestions per list: three for task 1, eight for task 2.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Task1,
    Task2,
}

impl Task {
    pub fn list_len(self) -> usize {
        match self {
            Task::Task1 => 3,
            Task::Task2 => 8,
        }
    }
}

impl FromStr for Task {
    type Err = GqsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "task1" => Ok(Task::Task1),
            "task2" => Ok(Task::Task2),
            _ => Err(GqsError::Config(format!(
                "unknown task {s:?} (expected task1 or task2)"
            ))),
        }
    }
}

impl Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Task1 => "task1",
            Task::Task2 => "task2",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub query_log_sessions: usize,
    pub coo_k: usize,
    /// Logged lists whose clicks form the CTR dataset.
    pub ctr_lists: usize,
    /// Logged lists used for supervised fine-tuning.
    pub sft_lists: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub task: Task,
    pub rounds: usize,
    pub world: WorldConfig,
    pub data: DataConfig,
    pub ctr: CtrConfig,
    pub ctr_train: CtrTrainConfig,
    pub policy: PolicyConfig,
    pub sft: SftConfig,
    pub dpo: DpoConfig,
    pub pairs: PairConfig,
    pub lp: LoopConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_task(Task::Task1)
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| GqsError::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(GqsError::Config(format!(
            "{key}: expected true or false, got {value:?}"
        ))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

impl RunConfig {
    pub fn for_task(task: Task) -> Self {
        let n = task.list_len();
        let world = WorldConfig::default();
        let mut ctr = CtrConfig::default();
        let mut policy = PolicyConfig::default();
        if task == Task::Task2 {
            // room for seven prior queries, and for a prompt plus eight queries
            ctr.encoder.max_len = 48;
            policy.max_len = 128;
        }
        Self {
            seed: 0,
            task,
            rounds: 3,
            world,
            data: DataConfig {
                query_log_sessions: 2000,
                coo_k: 2,
                ctr_lists: 700,
                sft_lists: 1000,
            },
            ctr,
            ctr_train: CtrTrainConfig::default(),
            policy,
            sft: SftConfig::default(),
            dpo: DpoConfig::default(),
            pairs: PairConfig::for_list_len(n),
            lp: LoopConfig::for_list_len(n),
        }
    }

    pub fn list_len(&self) -> usize {
        self.task.list_len()
    }

    /// `(key, comment, value)` for every setting, in file order.
    fn entries(&self) -> Vec<(&'static str, &'static str, String)> {
        let w = &self.world;
        let e = &self.ctr.encoder;
        let hidden: Vec<String> = self.ctr.hidden.iter().map(|h| h.to_string()).collect();
        let reference = match self.dpo.reference {
            ReferenceMode::Previous => "previous",
            ReferenceMode::RoundZero => "round_zero",
        };
        vec![
            ("seed", "master seed for every random stream", self.seed.to_string()),
            ("task", "task1: 3 suggestions per list, task2: 8", self.task.to_string()),
            (
                "rounds",
                "alignment rounds after the supervised baseline",
                self.rounds.to_string(),
            ),
            ("world.vocab_size", "", w.vocab_size.to_string()),
            ("world.topics", "", w.topics.to_string()),
            ("world.tokens_per_topic", "", w.tokens_per_topic.to_string()),
            ("world.topic_core_mass", "", w.topic_core_mass.to_string()),
            ("world.users", "", w.users.to_string()),
            ("world.profile_len", "", w.profile_len.to_string()),
            ("world.query_len", "", w.query_len.to_string()),
            ("world.response_len", "", w.response_len.to_string()),
            ("world.queries_per_topic", "", w.queries_per_topic.to_string()),
            ("world.n_max", "", w.n_max.to_string()),
            ("world.base_logit", "click logit intercept", w.base_logit.to_string()),
            ("world.topic_coef", "weight of topic match", w.topic_coef.to_string()),
            (
                "world.profile_coef",
                "weight of user affinity",
                w.profile_coef.to_string(),
            ),
            (
                "world.position_step",
                "logit penalty per display slot",
                w.position_step.to_string(),
            ),
            ("world.reference_generic_mass", "", w.reference_generic_mass.to_string()),
            ("world.reference_topic_mass", "", w.reference_topic_mass.to_string()),
            ("world.follow_up_on_topic", "", w.follow_up_on_topic.to_string()),
            (
                "data.query_log_sessions",
                "sessions mined for the COO dictionary",
                self.data.query_log_sessions.to_string(),
            ),
            (
                "data.coo_k",
                "co-occurring queries refilled into each prompt",
                self.data.coo_k.to_string(),
            ),
            (
                "data.ctr_lists",
                "logged lists in the click dataset",
                self.data.ctr_lists.to_string(),
            ),
            (
                "data.sft_lists",
                "logged lists for supervised fine-tuning",
                self.data.sft_lists.to_string(),
            ),
            ("encoder.d_model", "", e.d_model.to_string()),
            ("encoder.heads", "", e.heads.to_string()),
            ("encoder.d_ff", "", e.d_ff.to_string()),
            ("encoder.layers", "", e.layers.to_string()),
            ("encoder.max_len", "", e.max_len.to_string()),
            ("ctr.d_attn", "", self.ctr.d_attn.to_string()),
            ("ctr.d_pos", "", self.ctr.d_pos.to_string()),
            ("ctr.hidden", "MLP widths, comma separated", hidden.join(",")),
            (
                "ctr.per_source_attention",
                "one attention triple per source",
                self.ctr.per_source_attention.to_string(),
            ),
            ("ctr.epochs", "", self.ctr_train.epochs.to_string()),
            ("ctr.batch_lists", "", self.ctr_train.batch_lists.to_string()),
            ("ctr.lr", "", self.ctr_train.lr.to_string()),
            ("ctr.weight_decay", "", self.ctr_train.weight_decay.to_string()),
            (
                "ctr.validation_fraction",
                "",
                self.ctr_train.validation_fraction.to_string(),
            ),
            ("ctr.early_stopping", "", self.ctr_train.early_stopping.to_string()),
            ("policy.d_model", "", self.policy.d_model.to_string()),
            ("policy.heads", "", self.policy.heads.to_string()),
            ("policy.d_ff", "", self.policy.d_ff.to_string()),
            ("policy.layers", "", self.policy.layers.to_string()),
            (
                "policy.max_len",
                "prompt plus response tokens",
                self.policy.max_len.to_string(),
            ),
            ("policy.max_query_len", "", self.policy.max_query_len.to_string()),
            ("sft.epochs", "", self.sft.epochs.to_string()),
            ("sft.batch_size", "", self.sft.batch_size.to_string()),
            ("sft.lr", "", self.sft.lr.to_string()),
            ("dpo.beta", "", self.dpo.beta.to_string()),
            ("dpo.gamma", "", self.dpo.gamma.to_string()),
            (
                "dpo.lambda",
                "weight of the diversity term",
                self.dpo.lambda.to_string(),
            ),
            ("dpo.lr", "", self.dpo.lr.to_string()),
            ("dpo.epochs", "", self.dpo.epochs.to_string()),
            ("dpo.batch_size", "", self.dpo.batch_size.to_string()),
            ("dpo.reference", "previous or round_zero", reference.to_string()),
            (
                "pairs.delta",
                "minimum diversity of a chosen list",
                self.pairs.delta.to_string(),
            ),
            (
                "pairs.div_delta",
                "minimum diversity gap of a diversity pair",
                self.pairs.div_delta.to_string(),
            ),
            (
                "pairs.reward_tol",
                "maximum reward gap of a diversity pair",
                self.pairs.reward_tol.to_string(),
            ),
            (
                "pairs.theta_sim",
                "cosine above which two texts count as overlapping",
                self.pairs.theta_sim.to_string(),
            ),
            ("loop.m", "candidates per prompt", self.lp.m.to_string()),
            ("loop.prompts_per_round", "", self.lp.prompts_per_round.to_string()),
            (
                "loop.temperature",
                "sampling temperature for candidates",
                self.lp.temperature.to_string(),
            ),
            ("loop.epsilon", "importance weight clip", self.lp.epsilon.to_string()),
            ("loop.eval_prompts", "", self.lp.eval_prompts.to_string()),
            (
                "loop.fixed_ctr",
                "never recalibrate the CTR model",
                self.lp.fixed_ctr.to_string(),
            ),
            (
                "loop.fixed_prompts",
                "reuse one prompt set every round",
                self.lp.fixed_prompts.to_string(),
            ),
            ("eval.relevance_high", "", self.lp.relevance.high.to_string()),
            ("eval.relevance_low", "", self.lp.relevance.low.to_string()),
        ]
    }

    pub fn keys() -> Vec<&'static str> {
        RunConfig::default().entries().into_iter().map(|(k, _, _)| k).collect()
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.entries()
            .into_iter()
            .find(|(k, _, _)| *k == key)
            .map(|(_, _, v)| v)
    }

    /// Sets one key. `task` resets every task-dependent default, so it is
    /// applied before anything else when reading a file.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let w = &mut self.world;
        let e = &mut self.ctr.encoder;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "task" => {
                let seed = self.seed;
                *self = RunConfig::for_task(value.parse()?);
                self.seed = seed;
            }
            "rounds" => self.rounds = parse(key, value)?,
            "world.vocab_size" => w.vocab_size = parse(key, value)?,
            "world.topics" => w.topics = parse(key, value)?,
            "world.tokens_per_topic" => w.tokens_per_topic = parse(key, value)?,
            "world.topic_core_mass" => w.topic_core_mass = parse(key, value)?,
            "world.users" => w.users = parse(key, value)?,
            "world.profile_len" => w.profile_len = parse(key, value)?,
            "world.query_len" => w.query_len = parse(key, value)?,
            "world.response_len" => w.response_len = parse(key, value)?,
            "world.queries_per_topic" => w.queries_per_topic = parse(key, value)?,
            "world.n_max" => w.n_max = parse(key, value)?,
            "world.base_logit" => w.base_logit = parse(key, value)?,
            "world.topic_coef" => w.topic_coef = parse(key, value)?,
            "world.profile_coef" => w.profile_coef = parse(key, value)?,
            "world.position_step" => w.position_step = parse(key, value)?,
            "world.reference_generic_mass" => w.reference_generic_mass = parse(key, value)?,
            "world.reference_topic_mass" => w.reference_topic_mass = parse(key, value)?,
            "world.follow_up_on_topic" => w.follow_up_on_topic = parse(key, value)?,
            "data.query_log_sessions" => self.data.query_log_sessions = parse(key, value)?,
            "data.coo_k" => self.data.coo_k = parse(key, value)?,
            "data.ctr_lists" => self.data.ctr_lists = parse(key, value)?,
            "data.sft_lists" => self.data.sft_lists = parse(key, value)?,
            "encoder.d_model" => e.d_model = parse(key, value)?,
            "encoder.heads" => e.heads = parse(key, value)?,
            "encoder.d_ff" => e.d_ff = parse(key, value)?,
            "encoder.layers" => e.layers = parse(key, value)?,
            "encoder.max_len" => e.max_len = parse(key, value)?,
            "ctr.d_attn" => self.ctr.d_attn = parse(key, value)?,
            "ctr.d_pos" => self.ctr.d_pos = parse(key, value)?,
            "ctr.hidden" => self.ctr.hidden = parse_list(key, value)?,
            "ctr.per_source_attention" => self.ctr.per_source_attention = parse_bool(key, value)?,
            "ctr.epochs" => self.ctr_train.epochs = parse(key, value)?,
            "ctr.batch_lists" => self.ctr_train.batch_lists = parse(key, value)?,
            "ctr.lr" => self.ctr_train.lr = parse(key, value)?,
            "ctr.weight_decay" => self.ctr_train.weight_decay = parse(key, value)?,
            "ctr.validation_fraction" => self.ctr_train.validation_fraction = parse(key, value)?,
            "ctr.early_stopping" => self.ctr_train.early_stopping = parse_bool(key, value)?,
            "policy.d_model" => self.policy.d_model = parse(key, value)?,
            "policy.heads" => self.policy.heads = parse(key, value)?,
            "policy.d_ff" => self.policy.d_ff = parse(key, value)?,
            "policy.layers" => self.policy.layers = parse(key, value)?,
            "policy.max_len" => self.policy.max_len = parse(key, value)?,
            "policy.max_query_len" => self.policy.max_query_len = parse(key, value)?,
            "sft.epochs" => self.sft.epochs = parse(key, value)?,
            "sft.batch_size" => self.sft.batch_size = parse(key, value)?,
            "sft.lr" => self.sft.lr = parse(key, value)?,
            "dpo.beta" => self.dpo.beta = parse(key, value)?,
            "dpo.gamma" => self.dpo.gamma = parse(key, value)?,
            "dpo.lambda" => self.dpo.lambda = parse(key, value)?,
            "dpo.lr" => self.dpo.lr = parse(key, value)?,
            "dpo.epochs" => self.dpo.epochs = parse(key, value)?,
            "dpo.batch_size" => self.dpo.batch_size = parse(key, value)?,
            "dpo.reference" => {
                self.dpo.reference = match value {
                    "previous" => ReferenceMode::Previous,
                    "round_zero" => ReferenceMode::RoundZero,
                    _ => return Err(GqsError::Config(format!("dpo.reference: unknown mode {value:?}"))),
                }
            }
            "pairs.delta" => self.pairs.delta = parse(key, value)?,
            "pairs.div_delta" => self.pairs.div_delta = parse(key, value)?,
            "pairs.reward_tol" => self.pairs.reward_tol = parse(key, value)?,
            "pairs.theta_sim" => self.pairs.theta_sim = parse(key, value)?,
            "loop.m" => self.lp.m = parse(key, value)?,
            "loop.prompts_per_round" => self.lp.prompts_per_round = parse(key, value)?,
            "loop.temperature" => self.lp.temperature = parse(key, value)?,
            "loop.epsilon" => self.lp.epsilon = parse(key, value)?,
            "loop.eval_prompts" => self.lp.eval_prompts = parse(key, value)?,
            "loop.fixed_ctr" => self.lp.fixed_ctr = parse_bool(key, value)?,
            "loop.fixed_prompts" => self.lp.fixed_prompts = parse_bool(key, value)?,
            "eval.relevance_high" => self.lp.relevance.high = parse(key, value)?,
            "eval.relevance_low" => self.lp.relevance.low = parse(key, value)?,
            _ => return Err(GqsError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<'a>(&mut self, overrides: impl IntoIterator<Item = &'a str>) -> Result<()> {
        let pairs: Vec<(&str, &str)> = overrides
            .into_iter()
            .map(|o| {
                o.split_once('=')
                    .map(|(k, v)| (k.trim(), v.trim()))
                    .ok_or_else(|| GqsError::Config(format!("override {o:?} is not key=value")))
            })
            .collect::<Result<_>>()?;
        self.apply_pairs(&pairs)
    }

    fn apply_pairs(&mut self, pairs: &[(&str, &str)]) -> Result<()> {
        for (k, v) in pairs.iter().filter(|(k, _)| *k == "task") {
            self.set(k, v)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| *k != "task") {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# gqs run configuration\n");
        for (key, comment, value) in self.entries() {
            if !comment.is_empty() {
                out.push_str(&format!("# {comment}\n"));
            }
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| GqsError::Config(format!("line {}: expected key = value", i + 1)))?;
            pairs.push((k.trim(), v.trim()));
        }
        let mut config = RunConfig::default();
        config.apply_pairs(&pairs)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GqsError::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| GqsError::io(path, e))
    }

    /// SHA-256 of the serialized configuration.
    pub fn hash(&self) -> String {
        format!("{:x}", Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        let bad = |m: String| Err(GqsError::Config(m));
        let n = self.list_len();
        if n > self.world.n_max || n > self.ctr.n_max {
            return bad(format!("{n} suggestions exceed the world's or CTR model's n_max"));
        }
        if !self.ctr.encoder.d_model.is_multiple_of(self.ctr.encoder.heads)
            || !self.policy.d_model.is_multiple_of(self.policy.heads)
        {
            return bad("d_model must be divisible by heads".into());
        }
        if self.lp.m < 2 {
            return bad("loop.m must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.lp.epsilon) {
            return bad(format!("loop.epsilon {} outside [0, 1)", self.lp.epsilon));
        }
        if !(self.lp.temperature >= 0.0) {
            return bad("loop.temperature must be non-negative".into());
        }
        if self.data.ctr_lists == 0 || self.data.sft_lists == 0 || self.lp.eval_prompts == 0 {
            return bad("dataset sizes must be positive".into());
        }
        if !(self.lp.relevance.low <= self.lp.relevance.high) {
            return bad("eval.relevance_low must not exceed eval.relevance_high".into());
        }
        self.dpo.validate()?;
        let prior = (n - 1) * (self.world.query_len + 1);
        let longest_source = prior
            .max(self.world.response_len)
            .max(self.data.coo_k * (self.world.query_len + 1))
            + 1;
        if longest_source > self.ctr.encoder.max_len {
            return bad(format!(
                "encoder.max_len {} is shorter than the longest tagged source ({longest_source} tokens)",
                self.ctr.encoder.max_len
            ));
        }
        Ok(())
    }

    pub fn ctr_config(&self) -> CtrConfig {
        CtrConfig {
            encoder: EncoderConfig {
                vocab_size: self.world.vocab_size,
                ..self.ctr.encoder.clone()
            },
            ..self.ctr.clone()
        }
    }

    pub fn ctr_train_config(&self) -> CtrTrainConfig {
        CtrTrainConfig {
            seed: self.seed,
            ..self.ctr_train.clone()
        }
    }

    pub fn policy_config(&self) -> PolicyConfig {
        PolicyConfig {
            vocab_size: self.world.vocab_size,
            ..self.policy.clone()
        }
    }

    pub fn sft_config(&self) -> SftConfig {
        SftConfig {
            seed: self.seed,
            ..self.sft.clone()
        }
    }

    pub fn loop_config(&self) -> LoopConfig {
        LoopConfig {
            n: self.list_len(),
            pairs: self.pairs.clone(),
            dpo: DpoConfig {
                seed: self.seed,
                ..self.dpo.clone()
            },
            ctr_model: self.ctr_config(),
            ctr_train: self.ctr_train_config(),
            seed: self.seed,
            ..self.lp.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip_is_byte_identical() {
        for task in [Task::Task1, Task::Task2] {
            let mut c = RunConfig::for_task(task);
            c.seed = 17;
            c.dpo.lambda = 0.001;
            c.dpo.beta = 1.0 / 3.0;
            c.ctr.hidden = vec![16, 8, 4];
            let text = c.to_text();
            let back = RunConfig::from_text(&text).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.to_text(), text);
        }
    }

    #[test]
    fn every_key_can_be_set_to_its_own_value() {
        let c = RunConfig::for_task(Task::Task2);
        let mut d = RunConfig::for_task(Task::Task2);
        for key in RunConfig::keys() {
            d.set(key, &c.get(key).unwrap()).unwrap();
        }
        assert_eq!(c, d);
    }

    #[test]
    fn precedence_flags_over_file_over_defaults() {
        let file = "# comment\nseed = 5\ndpo.lambda = 0.01\n\n";
        let mut c = RunConfig::from_text(file).unwrap();
        assert_eq!(c.seed, 5);
        assert_eq!(c.dpo.lambda, 0.01);
        assert_eq!(c.dpo.beta, DpoConfig::default().beta);
        c.apply_overrides(["dpo.lambda=0.5", "rounds = 1"]).unwrap();
        assert_eq!((c.dpo.lambda, c.rounds, c.seed), (0.5, 1, 5));
    }

    #[test]
    fn task_profile_sets_dependent_defaults() {
        let c = RunConfig::from_text("pairs.delta = 0.25\ntask = task2\n").unwrap();
        assert_eq!(c.list_len(), 8);
        assert_eq!(c.pairs.reward_tol, 0.05 * 8.0);
        assert_eq!(c.pairs.delta, 0.25);
        assert!(RunConfig::for_task(Task::Task2).validate().is_ok());
        let mut short = RunConfig::for_task(Task::Task2);
        short.ctr.encoder.max_len = 32;
        assert!(matches!(short.validate(), Err(GqsError::Config(_))));
    }

    #[test]
    fn bad_input_is_a_config_error() {
        for text in [
            "nonsense",
            "seed = x",
            "nope = 1",
            "loop.fixed_ctr = yes",
            "dpo.beta = -1",
        ] {
            assert!(matches!(RunConfig::from_text(text), Err(GqsError::Config(_))), "{text}");
        }
    }
}
