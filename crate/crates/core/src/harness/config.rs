//! Experiment configuration: flat TOML sections, one per stage.

use super::HarnessError;
use crate::lm::{AdamConfig, Backend, TrainConfig, TransformerConfig};
use crate::probes::ProbeConfig;
use crate::unlearn::{Method, MethodConfig};
use crate::worldgen::{RenderOptions, WorldConfig};
use serde::{Deserialize, Serialize};

/// Named seeds. Every random stream of a run derives from one of these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub world: u64,
    pub train: u64,
    pub unlearn: u64,
    pub probe_shuffle: u64,
    pub sweep: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            world: 7,
            train: 11,
            unlearn: 13,
            probe_shuffle: 17,
            sweep: 19,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub backend: String,
    /// Comma-separated unlearning methods evaluated by `probe` and `report`.
    pub methods: String,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            backend: "transformer".into(),
            methods: "df_mcq,whp_plus_style,npo,grad_ascent".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSection {
    pub n_persons: usize,
    pub n_relations: usize,
    pub forget_size: usize,
    pub retain_size: usize,
    pub n_out_of_world: usize,
    pub objects_per_relation: usize,
    pub corpus_reps: usize,
    /// MCQ exemplars per fact and rep.
    pub mcq_per_rep: usize,
    /// Negative Yes-No exemplars per fact and rep.
    pub yes_no_negatives: usize,
}

impl Default for WorldSection {
    fn default() -> Self {
        let w = WorldConfig::default();
        WorldSection {
            n_persons: w.n_persons,
            n_relations: w.n_relations,
            forget_size: w.forget_size,
            retain_size: w.retain_size,
            n_out_of_world: w.n_out_of_world,
            objects_per_relation: w.objects_per_relation,
            corpus_reps: 2,
            mcq_per_rep: 8,
            yes_no_negatives: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d_model: 48,
            n_layers: 3,
            n_heads: 4,
            context: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Stop early below this mean loss; 0 disables.
    pub target_loss: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 75,
            batch_size: 32,
            lr: 3e-3,
            target_loss: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnlearnSection {
    pub n_choices: usize,
    pub forget_mcqs_per_person: usize,
    pub retain_mcqs_per_person: usize,
    /// Held-out MCQs per forget person for early stopping.
    pub monitor_mcqs_per_person: usize,
    /// Background persons whose passages are renamed onto each target.
    pub n_donors: usize,
    /// Rewrite training question stems through the paraphrase provider.
    pub paraphrase: bool,
    /// Overridden by the `UNLEARNLAB_PARAPHRASE_URL` environment variable.
    pub paraphrase_endpoint: String,
}

impl Default for UnlearnSection {
    fn default() -> Self {
        UnlearnSection {
            n_choices: 5,
            forget_mcqs_per_person: 120,
            retain_mcqs_per_person: 36,
            monitor_mcqs_per_person: 12,
            n_donors: 2,
            paraphrase: false,
            paraphrase_endpoint: String::new(),
        }
    }
}

/// Optimizer settings shared by every method section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSection {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub early_stop_entropy: Option<f64>,
    #[serde(default)]
    pub n_samples: Option<usize>,
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default)]
    pub retain_floor: Option<f64>,
}

impl MethodSection {
    fn from_method(m: Method) -> Self {
        let d = MethodConfig::default_for(m);
        MethodSection {
            epochs: d.epochs,
            lr: d.lr,
            batch_size: d.batch_size,
            early_stop_entropy: (m == Method::DfMcq).then_some(d.early_stop_entropy),
            n_samples: (m == Method::WhpPlusStyle).then_some(d.n_obfuscation_samples),
            beta: (m == Method::Npo).then_some(d.npo_beta),
            retain_floor: (m == Method::GradAscent).then_some(d.retain_floor),
        }
    }
}

fn df_mcq_default() -> MethodSection {
    MethodSection::from_method(Method::DfMcq)
}
fn whp_default() -> MethodSection {
    MethodSection::from_method(Method::WhpPlusStyle)
}
fn npo_default() -> MethodSection {
    MethodSection::from_method(Method::Npo)
}
fn ga_default() -> MethodSection {
    MethodSection::from_method(Method::GradAscent)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub mcq_per_relation: usize,
    pub retain_yes_no_negatives: usize,
    pub max_new_tokens: usize,
}

impl Default for ProbeSection {
    fn default() -> Self {
        ProbeSection {
            mcq_per_relation: 8,
            retain_yes_no_negatives: 2,
            max_new_tokens: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// Comma-separated learning rates (rows of the grid).
    pub lrs: String,
    /// Comma-separated obfuscation sample counts (columns).
    pub sample_counts: String,
    pub epochs: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            lrs: "0.0005,0.001,0.002".into(),
            sample_counts: "12,24,48".into(),
            epochs: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftSection {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for SftSection {
    fn default() -> Self {
        SftSection {
            epochs: 3,
            lr: 1e-3,
            batch_size: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContinualSection {
    /// Targets are the forget persons followed by background persons.
    pub n_targets: usize,
}

impl Default for ContinualSection {
    fn default() -> Self {
        ContinualSection { n_targets: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub seeds: Seeds,
    pub world: WorldSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub unlearn: UnlearnSection,
    #[serde(default = "df_mcq_default")]
    pub df_mcq: MethodSection,
    #[serde(default = "whp_default")]
    pub whp_plus: MethodSection,
    #[serde(default = "npo_default")]
    pub npo: MethodSection,
    #[serde(default = "ga_default")]
    pub grad_ascent: MethodSection,
    pub probe: ProbeSection,
    pub sweep: SweepSection,
    pub sft_attack: SftSection,
    pub continual: ContinualSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            run: RunSection::default(),
            seeds: Seeds::default(),
            world: WorldSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            unlearn: UnlearnSection::default(),
            df_mcq: df_mcq_default(),
            whp_plus: whp_default(),
            npo: npo_default(),
            grad_ascent: ga_default(),
            probe: ProbeSection::default(),
            sweep: SweepSection::default(),
            sft_attack: SftSection::default(),
            continual: ContinualSection::default(),
        }
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, s: &str) -> Result<Vec<T>, HarnessError> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| {
            x.parse()
                .map_err(|_| HarnessError::Config(format!("{key}: cannot parse {x:?}")))
        })
        .collect()
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let c: ExperimentConfig =
            toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.backend()?;
        self.methods()?;
        self.world_config().validate()?;
        if self.world.corpus_reps == 0 {
            return Err(HarnessError::Config(
                "world.corpus_reps must be >= 1".into(),
            ));
        }
        self.transformer_config().validate()?;
        if self.train.batch_size == 0 || !(self.train.lr > 0.0) {
            return Err(HarnessError::Config(
                "train.batch_size and train.lr must be positive".into(),
            ));
        }
        if self.unlearn.n_choices < 2 || self.unlearn.n_choices > crate::vocab::CHOICE_LETTERS.len()
        {
            return Err(HarnessError::Config(format!(
                "unlearn.n_choices = {} out of range",
                self.unlearn.n_choices
            )));
        }
        if self.unlearn.n_donors == 0 {
            return Err(HarnessError::Config(
                "unlearn.n_donors must be positive".into(),
            ));
        }
        if self.unlearn.forget_mcqs_per_person == 0 || self.unlearn.retain_mcqs_per_person == 0 {
            return Err(HarnessError::Config("MCQ counts must be positive".into()));
        }
        for m in [
            Method::DfMcq,
            Method::WhpPlusStyle,
            Method::Npo,
            Method::GradAscent,
        ] {
            self.method_config(m).validate()?;
        }
        if self.sweep_lrs()?.is_empty() || self.sweep_sample_counts()?.is_empty() {
            return Err(HarnessError::Config("sweep grid must not be empty".into()));
        }
        if self.continual.n_targets < 2 {
            return Err(HarnessError::Config(format!(
                "continual.n_targets = {} but continual unlearning needs at least 2 targets",
                self.continual.n_targets
            )));
        }
        Ok(())
    }

    pub fn backend(&self) -> Result<Backend, HarnessError> {
        self.run.backend.parse().map_err(HarnessError::Config)
    }

    pub fn methods(&self) -> Result<Vec<Method>, HarnessError> {
        let ms: Vec<Method> = parse_list("run.methods", &self.run.methods)?;
        let mut seen = Vec::new();
        for m in ms {
            if !seen.contains(&m) {
                seen.push(m);
            }
        }
        Ok(seen)
    }

    pub fn world_config(&self) -> WorldConfig {
        let w = &self.world;
        WorldConfig {
            n_persons: w.n_persons,
            n_relations: w.n_relations,
            forget_size: w.forget_size,
            retain_size: w.retain_size,
            n_out_of_world: w.n_out_of_world,
            objects_per_relation: w.objects_per_relation,
        }
    }

    pub fn render_options(&self) -> RenderOptions {
        RenderOptions {
            reps: self.world.corpus_reps,
            n_choices: self.unlearn.n_choices,
            mcq_per_rep: self.world.mcq_per_rep,
            yes_no_negatives: self.world.yes_no_negatives,
            ..RenderOptions::default()
        }
    }

    pub fn transformer_config(&self) -> TransformerConfig {
        TransformerConfig {
            d_model: self.model.d_model,
            n_layers: self.model.n_layers,
            n_heads: self.model.n_heads,
            context: self.model.context,
            seed: self.seeds.train,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            adam: AdamConfig {
                lr: self.train.lr,
                ..AdamConfig::default()
            },
            seed: self.seeds.train,
            target_loss: (self.train.target_loss > 0.0).then_some(self.train.target_loss),
        }
    }

    pub fn method_config(&self, m: Method) -> MethodConfig {
        let s = match m {
            Method::DfMcq => &self.df_mcq,
            Method::WhpPlusStyle => &self.whp_plus,
            Method::Npo => &self.npo,
            Method::GradAscent => &self.grad_ascent,
        };
        let d = MethodConfig::default_for(m);
        MethodConfig {
            method: m,
            epochs: s.epochs,
            lr: s.lr,
            batch_size: s.batch_size,
            npo_beta: s.beta.unwrap_or(d.npo_beta),
            n_obfuscation_samples: s.n_samples.unwrap_or(d.n_obfuscation_samples),
            early_stop_entropy: s.early_stop_entropy.unwrap_or(d.early_stop_entropy),
            retain_floor: s.retain_floor.unwrap_or(d.retain_floor),
            seed: crate::seeds::derive(self.seeds.unlearn, &[m as u64]),
        }
    }

    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            n_choices: self.unlearn.n_choices,
            mcq_per_relation: self.probe.mcq_per_relation,
            retain_yes_no_negatives: self.probe.retain_yes_no_negatives,
            seed: self.seeds.probe_shuffle,
        }
    }

    pub fn sweep_lrs(&self) -> Result<Vec<f64>, HarnessError> {
        parse_list("sweep.lrs", &self.sweep.lrs)
    }

    pub fn sweep_sample_counts(&self) -> Result<Vec<usize>, HarnessError> {
        parse_list("sweep.sample_counts", &self.sweep.sample_counts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = ExperimentConfig::from_toml(
            "[seeds]\nworld = 3\n[df_mcq]\nepochs = 9\nlr = 0.01\nbatch_size = 4\n",
        )
        .unwrap();
        assert_eq!(c.seeds.world, 3);
        assert_eq!(c.seeds.sweep, Seeds::default().sweep);
        let m = c.method_config(Method::DfMcq);
        assert_eq!((m.epochs, m.batch_size), (9, 4));
        assert_eq!(m.early_stop_entropy, MethodConfig::default_for(Method::DfMcq).early_stop_entropy);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(ExperimentConfig::from_toml("[seeds]\nwrold = 3\n").is_err());
        assert!(ExperimentConfig::from_toml("[run]\nbackend = \"gpu\"\n").is_err());
        assert!(ExperimentConfig::from_toml("[run]\nmethods = \"df_mcq,rmu\"\n").is_err());
        let e = ExperimentConfig::from_toml("[continual]\nn_targets = 1\n").unwrap_err();
        assert!(e.to_string().contains("at least 2"));
    }

    #[test]
    fn method_aliases_parse() {
        let c = ExperimentConfig::from_toml("[run]\nmethods = \"df-mcq, whp-plus, ga, df_mcq\"\n")
            .unwrap();
        assert_eq!(
            c.methods().unwrap(),
            vec![Method::DfMcq, Method::WhpPlusStyle, Method::GradAscent]
        );
    }
}
