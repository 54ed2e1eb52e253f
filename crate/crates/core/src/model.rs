//! The assembled model and its checkpoint format.

use std::path::Path;

use crate::codec::{ActionVocabulary, CodecMode, CodecParams};
use crate::config::RunConfig;
use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::net::{NetConfig, Network};
use crate::params::ParamStore;
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::tensor::Matrix;

pub const CHECKPOINT_MAGIC: &str = "diffant-ckpt-v1";

#[derive(Clone, Debug)]
pub struct Model {
    pub config: RunConfig,
    pub vocab: ActionVocabulary,
    pub store: ParamStore,
    pub net: Network,
    pub codec: CodecParams,
    pub schedule: NoiseSchedule,
}

impl Model {
    /// Fresh parameters drawn from `config.seed`.
    pub fn new(config: &RunConfig, input_dim: usize, vocab: ActionVocabulary) -> Result<Self> {
        config.validate()?;
        let m = &config.model;
        let net_config = NetConfig {
            input_dim,
            hidden_dim: m.hidden_dim,
            latent_dim: m.latent_dim,
            encoder_layers: m.encoder_layers,
            decoder_layers: m.decoder_layers,
            heads: m.heads,
            ffn_mult: m.ffn_mult,
            dropout: m.dropout,
            queries: m.queries,
            num_classes: vocab.num_classes(),
            mask: config.mask(),
            total_steps: config.schedule.steps,
        };
        let s = &config.schedule;
        let schedule = NoiseSchedule::new(s.steps, s.kind, s.beta_min, s.beta_max)?;
        let mut r = rng::stream(config.seed, 0x5eed);
        let mut store = ParamStore::new();
        let net = Network::new(&mut store, net_config, &mut r)?;
        let mode = if m.multilabel {
            CodecMode::ClassOnly
        } else {
            CodecMode::Sequence
        };
        let codec = CodecParams::new(&mut store, mode, vocab.num_classes(), m.latent_dim, &mut r);
        Ok(Self {
            config: config.clone(),
            vocab,
            store,
            net,
            codec,
            schedule,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.net.config.input_dim
    }

    pub fn slots(&self) -> usize {
        self.net.config.queries
    }

    pub fn eos(&self) -> usize {
        self.vocab.eos_id()
    }

    /// Variance of `q(z0 | a)`; tied to the first forward step.
    pub fn beta0(&self) -> f64 {
        self.schedule.beta(1)
    }

    /// Header, config echo, vocabulary, then named `f32` tensors.
    pub fn to_bytes(&self) -> Vec<u8> {
        let config = self.config.to_text();
        let vocab = self.vocab.to_text();
        let mut out = Vec::new();
        out.extend_from_slice(format!("{CHECKPOINT_MAGIC}\n").as_bytes());
        out.extend_from_slice(format!("input_dim {}\n", self.input_dim()).as_bytes());
        out.extend_from_slice(format!("config {}\n", config.len()).as_bytes());
        out.extend_from_slice(config.as_bytes());
        out.extend_from_slice(format!("vocab {}\n", vocab.len()).as_bytes());
        out.extend_from_slice(vocab.as_bytes());
        out.extend_from_slice(format!("tensors {}\n", self.store.len()).as_bytes());
        for (name, m) in self.store.iter() {
            out.extend_from_slice(format!("{name} {} {}\n", m.rows(), m.cols()).as_bytes());
            for v in m.as_slice() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.line()? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!(
                "missing `{CHECKPOINT_MAGIC}` header"
            )));
        }
        let input_dim = r.tagged("input_dim")?;
        let n = r.tagged("config")?;
        let config = RunConfig::parse(r.text(n)?)?;
        let n = r.tagged("vocab")?;
        let vocab = ActionVocabulary::parse(r.text(n)?)?;
        let count = r.tagged("tensors")?;
        let mut named = Vec::with_capacity(count);
        for _ in 0..count {
            let line = r.line()?.to_string();
            let parts: Vec<&str> = line.split(' ').collect();
            let [name, rows, cols] = parts[..] else {
                return Err(Error::Checkpoint(format!("bad tensor header `{line}`")));
            };
            let rows: usize = rows.parse().map_err(|_| Error::Checkpoint(line.clone()))?;
            let cols: usize = cols.parse().map_err(|_| Error::Checkpoint(line.clone()))?;
            let raw = r.take(4 * rows * cols)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            named.push((name.to_string(), Matrix::from_vec(rows, cols, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        let mut model = Self::new(&config, input_dim, vocab)?;
        model.store.load_from(&named)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            std::fs::read(path).map_err(|e| Error::data(path, format!("cannot read: {e}")))?;
        Self::from_bytes(&bytes)
    }

    /// Rounds every parameter through `f32`, matching a save/load cycle.
    pub fn quantize(&mut self) {
        for m in self.store.values_mut() {
            for v in m.as_mut_slice() {
                *v = *v as f32 as f64;
            }
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn text(&mut self, n: usize) -> Result<&'a str> {
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::Checkpoint("invalid utf-8".into()))
    }

    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let s = self.text(nl)?;
        self.pos += 1;
        Ok(s)
    }

    fn tagged(&mut self, tag: &str) -> Result<usize> {
        let line = self.line()?;
        line.strip_prefix(tag)
            .and_then(|r| r.strip_prefix(' '))
            .and_then(|r| r.parse().ok())
            .ok_or_else(|| Error::Checkpoint(format!("expected `{tag} <n>`, found `{line}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::GrammarSpec;

    fn small() -> Model {
        let mut c = RunConfig::default();
        c.model.hidden_dim = 8;
        c.model.latent_dim = 12;
        c.model.heads = 2;
        c.schedule.steps = 50;
        c.infer.steps = 10;
        Model::new(&c, 5, GrammarSpec::default_profile(0.0).vocabulary).unwrap()
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact_after_quantization() {
        let mut m = small();
        m.quantize();
        let bytes = m.to_bytes();
        assert!(bytes.starts_with(b"diffant-ckpt-v1\n"));
        let back = Model::from_bytes(&bytes).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(back.vocab, m.vocab);
        for (a, b) in back.store.values().iter().zip(m.store.values()) {
            assert_eq!(a, b);
        }
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let bytes = small().to_bytes();
        assert!(Model::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Model::from_bytes(b"not a checkpoint\n").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Model::from_bytes(&extra).is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = small();
        let b = small();
        assert_eq!(a.store.values(), b.store.values());
    }
}
