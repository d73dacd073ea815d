//! TOML configuration file. Every section is optional and falls back to the
//! library defaults; command-line flags override file values.

use std::path::Path;

use serde::{Deserialize, Serialize};
use stemflow::corpus::CorpusConfig;
use stemflow::eval::EvalConfig;
use stemflow::sampler::SampleConfig;
use stemflow::trainer::TrainConfig;

use crate::service::ServeConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub corpus: CorpusConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
    pub serve: ServeConfig,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use stemflow::trainer::Setting;

    #[test]
    fn empty_file_gives_defaults() {
        let c: FileConfig = toml::from_str("").unwrap();
        assert_eq!(c, FileConfig::default());
    }

    #[test]
    fn sections_override_fields() {
        let c: FileConfig = toml::from_str(
            r#"
            [corpus]
            compositions = 64
            [train]
            steps = 100
            [train.optimizer]
            learning_rate = 0.001
            [sample]
            num_steps = 8
            [eval]
            requests = 32
            settings = ["A", "C"]
            [serve]
            port = 9000
            "#,
        )
        .unwrap();
        assert_eq!(c.corpus.compositions, 64);
        assert_eq!(c.corpus.seed, CorpusConfig::default().seed);
        assert_eq!(c.train.steps, 100);
        assert_eq!(c.train.optimizer.learning_rate, 0.001);
        assert_eq!(c.sample.num_steps, 8);
        assert_eq!(c.eval.settings, vec![Setting::A, Setting::C]);
        assert_eq!(c.serve.port, 9000);
    }

    #[test]
    fn unknown_sections_rejected() {
        assert!(toml::from_str::<FileConfig>("[nope]\nx = 1").is_err());
        assert!(toml::from_str::<FileConfig>("[train.optimizer]\nlearnig_rate = 1.0").is_err());
        assert!(toml::from_str::<FileConfig>("[serve]\nprot = 1").is_err());
    }
}
