//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "GCRN" u32 version(=1)
//! str settings            (key = value lines)
//! u64 min_count, u32 n, n × str   vocabulary in id order
//! 3 × (u32 n, n × str)    train / dev / test image ids
//! tensors                 parameters (best by dev loss)
//! u8 has_state
//!   u64 epochs_done, f64 learning_rate, f64 best_dev
//!   u32 n, n × (u64 epoch, f64 train_loss, f64 dev_loss, f64 lr)
//!   tensors               current parameters
//!   tensors               RMSprop cache
//! ```
//!
//! `str` is a `u32` byte length then UTF-8. `tensors` is a `u32` count then per
//! tensor a `str` name, `u32` rank, `rank × u64` dims and the `f64` values.

use std::path::Path;

use crate::data::{SplitIds, Vocabulary};
use crate::error::{Error, Result};
use crate::fsio;
use crate::model::{ModelConfig, ModelParams};
use crate::optim::{EpochRecord, RmsPropState, TrainSession};
use crate::settings::Settings;

const MAGIC: &[u8; 4] = b"GCRN";
const VERSION: u32 = 1;

/// Optimizer state needed to continue training exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    pub epochs_done: u64,
    pub learning_rate: f64,
    pub best_dev: f64,
    pub history: Vec<EpochRecord>,
    pub params: ModelParams,
    pub rms_cache: ModelParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// `model.vocab_size` and `model.feature_dim` are filled in.
    pub settings: Settings,
    pub vocab: Vocabulary,
    pub splits: SplitIds,
    pub params: ModelParams,
    pub state: Option<TrainingState>,
}

impl Checkpoint {
    pub fn from_session(settings: &Settings, vocab: &Vocabulary, splits: &SplitIds, session: &TrainSession) -> Self {
        let mut settings = settings.clone();
        settings.model = session.model_cfg.clone();
        settings.train = session.train_cfg.clone();
        Self {
            settings,
            vocab: vocab.clone(),
            splits: splits.clone(),
            params: session.best.clone(),
            state: Some(TrainingState {
                epochs_done: session.epochs_done() as u64,
                learning_rate: session.state.learning_rate,
                best_dev: session.best_dev,
                history: session.history.clone(),
                params: session.params.clone(),
                rms_cache: session.state.cache.clone(),
            }),
        }
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.settings.model
    }

    /// Rebuilds the training session; the training config may differ from the
    /// saved one (for example a larger `epochs`).
    pub fn into_session(self, train_cfg: crate::optim::TrainConfig) -> Result<TrainSession> {
        let state = self
            .state
            .ok_or_else(|| Error::Data("checkpoint has no training state to resume".into()))?;
        let mut session = TrainSession::with_params(self.settings.model.clone(), train_cfg, state.params)?;
        session.best = self.params;
        session.best_dev = state.best_dev;
        session.history = state.history;
        session.state = RmsPropState {
            cache: state.rms_cache,
            learning_rate: state.learning_rate,
        };
        Ok(session)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.str(&self.settings.to_text());
        w.u64(self.vocab.min_count() as u64);
        w.strs(self.vocab.tokens());
        for ids in [&self.splits.train, &self.splits.dev, &self.splits.test] {
            w.strs(ids);
        }
        w.tensors(&self.params);
        match &self.state {
            None => w.0.push(0),
            Some(s) => {
                w.0.push(1);
                w.u64(s.epochs_done);
                w.f64(s.learning_rate);
                w.f64(s.best_dev);
                w.u32(s.history.len() as u32);
                for r in &s.history {
                    w.u64(r.epoch as u64);
                    w.f64(r.train_loss);
                    w.f64(r.dev_loss);
                    w.f64(r.learning_rate);
                }
                w.tensors(&s.params);
                w.tensors(&s.rms_cache);
            }
        }
        w.0
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { path, bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let settings_text = r.str()?;
        let settings = Settings::parse_text(&path.display().to_string(), &settings_text)
            .map_err(|e| Error::format(path, format!("stored settings: {e}")))?;
        let min_count = r.u64()? as usize;
        let vocab = Vocabulary::from_tokens(r.strs()?, min_count).map_err(|e| Error::format(path, e.to_string()))?;
        let splits = SplitIds {
            train: r.strs()?,
            dev: r.strs()?,
            test: r.strs()?,
        };
        let cfg = &settings.model;
        if cfg.vocab_size != vocab.len() {
            return Err(Error::format(
                path,
                format!("vocab_size {} but {} vocabulary entries", cfg.vocab_size, vocab.len()),
            ));
        }
        cfg.validate().map_err(|e| Error::format(path, e.to_string()))?;
        let params = r.tensors(cfg)?;
        let state = match r.u8()? {
            0 => None,
            1 => {
                let epochs_done = r.u64()?;
                let learning_rate = r.f64()?;
                let best_dev = r.f64()?;
                let n = r.u32()? as usize;
                let mut history = Vec::with_capacity(n.min(1 << 16));
                for _ in 0..n {
                    history.push(EpochRecord {
                        epoch: r.u64()? as usize,
                        train_loss: r.f64()?,
                        dev_loss: r.f64()?,
                        learning_rate: r.f64()?,
                    });
                }
                Some(TrainingState {
                    epochs_done,
                    learning_rate,
                    best_dev,
                    history,
                    params: r.tensors(cfg)?,
                    rms_cache: r.tensors(cfg)?,
                })
            }
            other => return Err(Error::format(path, format!("bad training-state flag {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            settings,
            vocab,
            splits,
            params,
            state,
        })
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    fsio::write_atomic(path, &ckpt.to_bytes())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    Checkpoint::from_bytes(path, &fsio::read(path)?)
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }

    fn strs(&mut self, v: &[String]) {
        self.u32(v.len() as u32);
        for s in v {
            self.str(s);
        }
    }

    fn tensors(&mut self, params: &ModelParams) {
        let tensors = params.tensors();
        self.u32(tensors.len() as u32);
        for t in tensors {
            self.str(&t.name);
            self.u32(t.dims.len() as u32);
            for &d in &t.dims {
                self.u64(d as u64);
            }
            for &x in t.data {
                self.f64(x);
            }
        }
    }
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(self.path, format!("truncated checkpoint at byte {}", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let at = self.pos;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::format(self.path, format!("invalid UTF-8 string at byte {at}")))
    }

    fn strs(&mut self) -> Result<Vec<String>> {
        let n = self.u32()? as usize;
        (0..n).map(|_| self.str()).collect()
    }

    fn tensors(&mut self, cfg: &ModelConfig) -> Result<ModelParams> {
        let mut params = ModelParams::zeros(cfg);
        let expected: Vec<(String, Vec<usize>)> = params
            .tensors()
            .into_iter()
            .map(|t| (t.name, t.dims))
            .collect();
        let n = self.u32()? as usize;
        if n != expected.len() {
            return Err(Error::format(
                self.path,
                format!("expected {} tensors, found {n}", expected.len()),
            ));
        }
        for (slot, (name, dims)) in params.tensors_mut().into_iter().zip(expected) {
            let got = self.str()?;
            if got != name {
                return Err(Error::format(self.path, format!("expected tensor `{name}`, found `{got}`")));
            }
            let rank = self.u32()? as usize;
            let got_dims = (0..rank)
                .map(|_| self.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            if got_dims != dims {
                return Err(Error::format(
                    self.path,
                    format!("tensor `{name}` has dims {got_dims:?}, expected {dims:?}"),
                ));
            }
            for x in slot.data.iter_mut() {
                *x = self.f64()?;
            }
        }
        Ok(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_vocab;
    use crate::model::{init_params, FeedMode};

    fn sample(with_state: bool) -> Checkpoint {
        let vocab = build_vocab(["a dog in a park", "a cat"].into_iter(), 1).unwrap();
        let mut settings = Settings::default();
        settings.model.vocab_size = vocab.len();
        settings.model.feature_dim = 6;
        settings.model.hidden_dim = 5;
        settings.model.embed_dim = 3;
        settings.model.feed_mode = FeedMode::FirstStepOnly;
        settings.train.learning_rate = 0.1 + 0.2;
        let cfg = settings.model.clone();
        let mut params = init_params(&cfg, 4);
        params.bd[0] = f64::MIN_POSITIVE / 3.0;
        params.bg[1] = -0.0;
        let state = with_state.then(|| TrainingState {
            epochs_done: 2,
            learning_rate: 0.5,
            best_dev: 1.25,
            history: vec![EpochRecord {
                epoch: 1,
                train_loss: 2.0,
                dev_loss: 1.5,
                learning_rate: 0.7,
            }],
            params: init_params(&cfg, 5),
            rms_cache: init_params(&cfg, 6),
        });
        Checkpoint {
            settings,
            vocab,
            splits: SplitIds {
                train: vec!["t1".into(), "t2".into()],
                dev: vec!["d".into()],
                test: vec![],
            },
            params,
            state,
        }
    }

    fn bits(p: &ModelParams) -> Vec<u64> {
        p.tensors().iter().flat_map(|t| t.data.iter().map(|x| x.to_bits())).collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for with_state in [false, true] {
            let c = sample(with_state);
            let p = dir.path().join("m.ckpt");
            save_checkpoint(&p, &c).unwrap();
            let back = load_checkpoint(&p).unwrap();
            assert_eq!(bits(&back.params), bits(&c.params));
            assert_eq!(back.settings, c.settings);
            assert_eq!(back.vocab, c.vocab);
            assert_eq!(back.splits, c.splits);
            assert_eq!(back.state, c.state);
            assert_eq!(back.to_bytes(), c.to_bytes());
        }
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample(true).to_bytes();
        let p = Path::new("x.ckpt");
        assert!(Checkpoint::from_bytes(p, &bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(p, &extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        let msg = Checkpoint::from_bytes(p, &magic).unwrap_err().to_string();
        assert!(msg.contains("x.ckpt"), "{msg}");
    }

    #[test]
    fn missing_file_names_path() {
        let msg = load_checkpoint("/nonexistent/dir/m.ckpt").unwrap_err().to_string();
        assert!(msg.contains("/nonexistent/dir/m.ckpt"));
    }
}
