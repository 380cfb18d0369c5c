//! Plain-text `key = value` training configuration.
//!
//! The canonical serialization is diff-friendly and order-stable; parsing
//! accepts any key order, `#` comments, and blank lines. Unknown keys are
//! errors.

use crate::losses::LossWeights;
use crate::model::ArchVariant;

/// Every knob of a training run. Defaults follow the training protocol:
/// batch 8, 100 epochs, constant learning rate 0.001, loss weights
/// (1, 0.01, 200, 0.1).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub variant: ArchVariant,
    pub input_hw: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub use_gan: bool,
    pub checkpoint_every: usize,
    pub loss: LossWeights,
    pub seed_model: u64,
    pub seed_data: u64,
    pub seed_extractor: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: ArchVariant::UAttention,
            input_hw: 128,
            batch_size: 8,
            epochs: 100,
            lr: 0.001,
            use_gan: true,
            checkpoint_every: 100,
            loss: LossWeights::default(),
            seed_model: 7,
            seed_data: 11,
            seed_extractor: crate::losses::EXTRACTOR_SEED,
        }
    }
}

impl TrainConfig {
    /// Canonical text form; `parse` inverts it exactly.
    pub fn to_text(&self) -> String {
        format!(
            "variant = {}\n\
             input_hw = {}\n\
             batch_size = {}\n\
             epochs = {}\n\
             lr = {}\n\
             use_gan = {}\n\
             checkpoint_every = {}\n\
             loss.l1 = {}\n\
             loss.perceptual = {}\n\
             loss.style = {}\n\
             loss.gan = {}\n\
             seed.model = {}\n\
             seed.data = {}\n\
             seed.extractor = {}\n",
            self.variant.name(),
            self.input_hw,
            self.batch_size,
            self.epochs,
            self.lr,
            self.use_gan,
            self.checkpoint_every,
            self.loss.l1,
            self.loss.perceptual,
            self.loss.style,
            self.loss.gan,
            self.seed_model,
            self.seed_data,
            self.seed_extractor
        )
    }

    /// Parse over defaults; later lines override earlier ones.
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut cfg = TrainConfig::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    /// Apply `key = value` lines onto this config.
    pub fn apply(&mut self, text: &str) -> Result<(), String> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| format!("line {}: expected key = value, got {line:?}", lineno + 1))?;
            let err = |msg: String| format!("line {}: {msg}", lineno + 1);
            match key {
                "variant" => {
                    self.variant = ArchVariant::parse(value)
                        .ok_or_else(|| err(format!("unknown variant {value} (uattn|baseline|pyramid|hourglass-simple)")))?
                }
                "input_hw" => self.input_hw = value.parse().map_err(|_| err(format!("bad input_hw {value}")))?,
                "batch_size" => self.batch_size = value.parse().map_err(|_| err(format!("bad batch_size {value}")))?,
                "epochs" => self.epochs = value.parse().map_err(|_| err(format!("bad epochs {value}")))?,
                "lr" => self.lr = value.parse().map_err(|_| err(format!("bad lr {value}")))?,
                "use_gan" => self.use_gan = value.parse().map_err(|_| err(format!("bad use_gan {value}")))?,
                "checkpoint_every" => {
                    self.checkpoint_every = value.parse().map_err(|_| err(format!("bad checkpoint_every {value}")))?
                }
                "loss.l1" => self.loss.l1 = value.parse().map_err(|_| err(format!("bad loss.l1 {value}")))?,
                "loss.perceptual" => {
                    self.loss.perceptual = value.parse().map_err(|_| err(format!("bad loss.perceptual {value}")))?
                }
                "loss.style" => self.loss.style = value.parse().map_err(|_| err(format!("bad loss.style {value}")))?,
                "loss.gan" => self.loss.gan = value.parse().map_err(|_| err(format!("bad loss.gan {value}")))?,
                "seed.model" => self.seed_model = value.parse().map_err(|_| err(format!("bad seed.model {value}")))?,
                "seed.data" => self.seed_data = value.parse().map_err(|_| err(format!("bad seed.data {value}")))?,
                "seed.extractor" => {
                    self.seed_extractor = value.parse().map_err(|_| err(format!("bad seed.extractor {value}")))?
                }
                other => return Err(err(format!("unknown key {other}"))),
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_protocol() {
        let c = TrainConfig::default();
        assert_eq!(c.batch_size, 8);
        assert_eq!(c.epochs, 100);
        assert_eq!(c.lr, 0.001);
        assert_eq!(c.loss, LossWeights::default());
        assert!(c.use_gan);
    }

    #[test]
    fn text_round_trip_is_exact() {
        let c = TrainConfig::default();
        let parsed = TrainConfig::parse(&c.to_text()).unwrap();
        assert_eq!(parsed, c);

        let mut odd = TrainConfig::default();
        odd.variant = ArchVariant::Pyramid3;
        odd.lr = 0.00025;
        odd.loss.style = 12.5;
        odd.use_gan = false;
        let again = TrainConfig::parse(&odd.to_text()).unwrap();
        assert_eq!(again, odd);
    }

    #[test]
    fn comments_and_overrides() {
        let text = "# comment\nbatch_size = 4\n\nbatch_size = 2\n";
        let c = TrainConfig::parse(text).unwrap();
        assert_eq!(c.batch_size, 2);
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(TrainConfig::parse("bogus = 3").is_err());
        assert!(TrainConfig::parse("variant = resnet").is_err());
        assert!(TrainConfig::parse("lr fast").is_err());
    }
}
