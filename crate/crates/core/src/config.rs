//! Run configuration: every knob of the correction pipeline and the
//! self-training harness, with a flat `key = value` text format.
//!
//! ```text
//! # comments start with '#'
//! lambda = 0.5
//! k = 50
//! ```
//!
//! Unknown keys are rejected. Values are validated by [`RunConfig::validate`].

use serde::Serialize;

use crate::clustering::DbscanParams;
use crate::dataset::SynthSpec;
use crate::error::{Error, Result};

macro_rules! run_config {
    ($( $(#[$doc:meta])* $name:ident : $ty:ty = $default:expr ),* $(,)?) => {
        /// Fully-resolved configuration. Field names double as config-file keys
        /// and CLI override flags.
        #[derive(Debug, Clone, PartialEq, Serialize)]
        pub struct RunConfig {
            $( $(#[$doc])* pub $name: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $( $name: $default, )* }
            }
        }

        impl RunConfig {
            /// Every accepted key, in declaration order.
            pub const KEYS: &'static [&'static str] = &[ $( stringify!($name), )* ];

            /// Parses `value` into the field named `key`.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( stringify!($name) => {
                        self.$name = value.trim().parse().map_err(|_| {
                            Error::Config(format!("cannot parse `{}` for key `{}`", value.trim(), key))
                        })?;
                    } )*
                    _ => return Err(Error::Config(format!("unknown key `{key}`"))),
                }
                Ok(())
            }
        }
    };
}

run_config! {
    /// Weight of feature similarity against score similarity.
    lambda: f64 = 0.5,
    /// Neighbors per node in the kNN graph.
    k: usize = 50,
    /// Edges with confidence below this are pruned.
    tau1: f64 = 0.6,
    /// Edges with node connectivity below this are pruned.
    tau2: f64 = 0.6,
    /// Training iterations of the correction network (early-stop budget).
    t_e: usize = 250,
    /// Focal-loss focusing parameter.
    gamma: f64 = 2.0,
    lr: f64 = 0.1,
    weight_decay: f64 = 1e-5,
    /// Heavy-ball momentum of the correction network optimizer.
    momentum: f64 = 0.9,
    gcn_layers: usize = 1,

    /// Self-training epochs T.
    epochs: usize = 30,
    /// Gradient steps on the extractor per epoch.
    inner_steps: usize = 300,
    extractor_lr: f64 = 2.0,
    /// Output dimension of the toy extractor.
    embed_dim: usize = 64,
    /// Fraction of epochs before correction starts.
    p_s: f64 = 0.2,
    /// Epochs between corrections.
    t_c: usize = 2,
    /// Fraction of epochs at which the extractor is re-initialized once.
    p_r: f64 = 0.8,

    eps: f64 = 0.4,
    min_pts: usize = 4,

    n_identities: usize = 30,
    samples_per_identity: usize = 20,
    d_raw: usize = 64,
    n_cameras: usize = 4,
    camera_shift: f64 = 2.0,
    cluster_spread: f64 = 0.3,

    /// Label noise injected on top of the clustering in fixed scenarios.
    flip_rate: f64 = 0.2,
    outlier_rate: f64 = 0.1,

    seed: u64 = 0,
}

fn range_err(key: &str, value: impl std::fmt::Display, expect: &str) -> Error {
    Error::Config(format!("`{key}` = {value} out of range, expected {expect}"))
}

fn finite_in(key: &str, v: f64, lo: f64, hi: f64) -> Result<()> {
    if v.is_finite() && v >= lo && v <= hi {
        Ok(())
    } else {
        Err(range_err(key, v, &format!("[{lo}, {hi}]")))
    }
}

impl RunConfig {
    /// Defaults overridden by the `key = value` lines of `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", idx + 1))
            })?;
            self.set(key.trim(), value)
                .map_err(|e| Error::Config(format!("line {}: {e}", idx + 1)))?;
        }
        Ok(())
    }

    /// Renders the config in the text format accepted by [`RunConfig::parse`].
    pub fn to_text(&self) -> String {
        let json = serde_json::to_value(self).expect("config serializes");
        let mut out = String::new();
        for key in Self::KEYS {
            out.push_str(&format!("{key} = {}\n", json[*key]));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        finite_in("lambda", self.lambda, 0.0, 1.0)?;
        if self.k < 1 {
            return Err(range_err("k", self.k, ">= 1"));
        }
        finite_in("tau1", self.tau1, 0.0, f64::MAX)?;
        finite_in("tau2", self.tau2, 0.0, f64::MAX)?;
        if self.t_e < 1 {
            return Err(range_err("t_e", self.t_e, ">= 1"));
        }
        finite_in("gamma", self.gamma, 0.0, f64::MAX)?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(range_err("lr", self.lr, "> 0"));
        }
        finite_in("weight_decay", self.weight_decay, 0.0, f64::MAX)?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(range_err("momentum", self.momentum, "in [0, 1)"));
        }
        if self.gcn_layers < 1 {
            return Err(range_err("gcn_layers", self.gcn_layers, ">= 1"));
        }
        self.loop_config().validate()?;
        self.dbscan_params()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.synth_spec()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        finite_in("flip_rate", self.flip_rate, 0.0, 1.0)?;
        finite_in("outlier_rate", self.outlier_rate, 0.0, 1.0)?;
        Ok(())
    }

    pub fn dbscan_params(&self) -> DbscanParams {
        DbscanParams {
            eps: self.eps,
            min_pts: self.min_pts,
        }
    }

    /// Generator parameters, seeded by `seed`.
    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            n_identities: self.n_identities,
            samples_per_identity: self.samples_per_identity,
            d_raw: self.d_raw,
            n_cameras: self.n_cameras,
            camera_shift: self.camera_shift,
            cluster_spread: self.cluster_spread,
            seed: self.seed,
        }
    }

    pub fn loop_config(&self) -> LoopConfig {
        LoopConfig {
            epochs: self.epochs,
            inner_steps: self.inner_steps,
            extractor_lr: self.extractor_lr,
            embed_dim: self.embed_dim,
            p_s: self.p_s,
            t_c: self.t_c,
            p_r: self.p_r,
        }
    }
}

/// Schedule of the self-training loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LoopConfig {
    pub epochs: usize,
    pub inner_steps: usize,
    pub extractor_lr: f64,
    pub embed_dim: usize,
    pub p_s: f64,
    pub t_c: usize,
    pub p_r: f64,
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(range_err("epochs", self.epochs, ">= 1"));
        }
        if !(self.extractor_lr > 0.0 && self.extractor_lr.is_finite()) {
            return Err(range_err("extractor_lr", self.extractor_lr, "> 0"));
        }
        if self.embed_dim < 1 {
            return Err(range_err("embed_dim", self.embed_dim, ">= 1"));
        }
        finite_in("p_s", self.p_s, 0.0, 1.0)?;
        finite_in("p_r", self.p_r, 0.0, 1.0)?;
        if self.t_c < 1 {
            return Err(range_err("t_c", self.t_c, ">= 1"));
        }
        Ok(())
    }

    /// First epoch that applies correction, `floor(p_s * T)`.
    pub fn glc_start(&self) -> usize {
        (self.p_s * self.epochs as f64).floor() as usize
    }

    /// Epoch whose training starts from a re-initialized extractor,
    /// `floor(p_r * T)`; equal to `T` means no restart.
    pub fn restart_epoch(&self) -> usize {
        (self.p_r * self.epochs as f64).floor() as usize
    }

    pub fn applies_glc(&self, epoch: usize) -> bool {
        let start = self.glc_start();
        epoch >= start && (epoch - start).is_multiple_of(self.t_c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::default();
        assert_eq!((c.lambda, c.k, c.tau1, c.tau2), (0.5, 50, 0.6, 0.6));
        assert_eq!((c.t_e, c.gamma, c.lr, c.weight_decay), (250, 2.0, 0.1, 1e-5));
        assert_eq!((c.p_s, c.t_c, c.p_r, c.gcn_layers), (0.2, 2, 0.8, 1));
        c.validate().unwrap();
    }

    #[test]
    fn parse_and_reject() {
        let c = RunConfig::parse("# hi\nk = 10 # inline\n\nlambda=1\n").unwrap();
        assert_eq!(c.k, 10);
        assert_eq!(c.lambda, 1.0);
        assert!(RunConfig::parse("bogus = 1").is_err());
        assert!(RunConfig::parse("k = ten").is_err());
        assert!(RunConfig::parse("k 10").is_err());
        let bad = RunConfig::parse("lambda = 1.5").unwrap();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn text_round_trip() {
        let c = RunConfig {
            tau1: 0.123456789,
            seed: 42,
            ..RunConfig::default()
        };
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn schedule() {
        let l = RunConfig::default().loop_config();
        assert_eq!(l.glc_start(), 6);
        assert_eq!(l.restart_epoch(), 24);
        assert!(!l.applies_glc(5));
        assert!(l.applies_glc(6));
        assert!(!l.applies_glc(7));
        assert!(l.applies_glc(8));
    }
}
