//! Run configuration files.
//!
//! ```text
//! # comment
//! [section]
//! key = value
//! ```
//!
//! Sections are `arch`, `pretrain`, `adapt`, `data` and `io`. Unknown
//! sections or keys, duplicates and unparsable values are errors carrying
//! the 1-based line number. [`RunConfig::to_text`] renders every key with its
//! effective value, which is also how the defaults are documented.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::data::Augment;
use crate::error::{Error, Result};
use crate::imageio::PgmDepth;
use crate::losses::MaskFill;
use crate::models::{preset, ArchitectureSpec};
use crate::training::{AdaptConfig, AdaptMode, LossKind, PretrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub preset: String,
    pub depth: usize,
    pub width: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            preset: "dncnn-s".into(),
            depth: 8,
            width: 32,
        }
    }
}

impl ArchConfig {
    pub fn spec(&self) -> Result<ArchitectureSpec> {
        preset(&self.preset, self.depth, self.width)
    }
}

/// Synthetic dataset parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub count: usize,
    pub size: usize,
    pub shapes_lo: usize,
    pub shapes_hi: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            count: 200,
            size: 64,
            shapes_lo: 1,
            shapes_hi: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IoConfig {
    pub pgm_depth: PgmDepth,
}

impl Default for IoConfig {
    fn default() -> Self {
        IoConfig {
            pgm_depth: PgmDepth::Sixteen,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub arch: ArchConfig,
    pub pretrain: PretrainConfig,
    pub adapt: AdaptConfig,
    pub data: DataConfig,
    pub io: IoConfig,
}

fn parse_value<V: FromStr>(line: usize, key: &str, value: &str) -> Result<V> {
    value.parse().map_err(|_| Error::Config {
        line,
        reason: format!("invalid value {value:?} for key {key:?}"),
    })
}

fn parse_opt_f64(line: usize, key: &str, value: &str) -> Result<Option<f64>> {
    if value == "none" {
        Ok(None)
    } else {
        parse_value(line, key, value).map(Some)
    }
}

fn parse_range<V: FromStr + Copy>(line: usize, key: &str, value: &str) -> Result<(V, V)> {
    match value.split_once("..") {
        Some((lo, hi)) => Ok((parse_value(line, key, lo.trim())?, parse_value(line, key, hi.trim())?)),
        None => {
            let v = parse_value(line, key, value)?;
            Ok((v, v))
        }
    }
}

fn parse_depth(line: usize, key: &str, value: &str) -> Result<PgmDepth> {
    match value {
        "8" => Ok(PgmDepth::Eight),
        "16" => Ok(PgmDepth::Sixteen),
        _ => Err(Error::Config {
            line,
            reason: format!("invalid value {value:?} for key {key:?} (expected 8 or 16)"),
        }),
    }
}

fn parse_fill(line: usize, key: &str, value: &str) -> Result<MaskFill> {
    match value {
        "neighbor_mean" => Ok(MaskFill::NeighborMean),
        "random_uniform" => Ok(MaskFill::RandomUniform),
        _ => Err(Error::Config {
            line,
            reason: format!("invalid value {value:?} for key {key:?} (expected neighbor_mean or random_uniform)"),
        }),
    }
}

fn fill_name(f: MaskFill) -> &'static str {
    match f {
        MaskFill::NeighborMean => "neighbor_mean",
        MaskFill::RandomUniform => "random_uniform",
    }
}

fn opt_text(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_else(|| "none".into())
}

fn wrap<T>(line: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Config { .. } => e,
        other => Error::Config {
            line,
            reason: other.to_string(),
        },
    })
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section: Option<String> = None;
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap().trim();
            if content.is_empty() {
                continue;
            }
            if let Some(name) = content.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| Error::Config {
                    line,
                    reason: format!("unterminated section header {content:?}"),
                })?;
                let name = name.trim();
                if !["arch", "pretrain", "adapt", "data", "io"].contains(&name) {
                    return Err(Error::Config {
                        line,
                        reason: format!("unknown section [{name}]"),
                    });
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Config {
                line,
                reason: format!("expected `key = value`, got {content:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            let Some(sec) = section.as_deref() else {
                return Err(Error::Config {
                    line,
                    reason: format!("key {key:?} outside any section"),
                });
            };
            if !seen.insert(format!("{sec}.{key}")) {
                return Err(Error::Config {
                    line,
                    reason: format!("duplicate key {key:?} in [{sec}]"),
                });
            }
            cfg.set(sec, key, value, line)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, sec: &str, key: &str, value: &str, line: usize) -> Result<()> {
        let unknown = || Error::Config {
            line,
            reason: format!("unknown key {key:?} in [{sec}]"),
        };
        match sec {
            "arch" => match key {
                "preset" => self.arch.preset = value.to_string(),
                "depth" => self.arch.depth = parse_value(line, key, value)?,
                "width" => self.arch.width = parse_value(line, key, value)?,
                _ => return Err(unknown()),
            },
            "pretrain" => {
                let p = &mut self.pretrain;
                match key {
                    "epochs" => p.epochs = parse_value(line, key, value)?,
                    "lr" => p.lr = parse_value(line, key, value)?,
                    "decay_start" => p.decay_start = parse_value(line, key, value)?,
                    "decay_every" => p.decay_every = parse_value(line, key, value)?,
                    "decay_factor" => p.decay_factor = parse_value(line, key, value)?,
                    "sigma255" => (p.sigma255_lo, p.sigma255_hi) = parse_range(line, key, value)?,
                    "batch_size" => p.batch_size = parse_value(line, key, value)?,
                    "patches_per_epoch" => p.patches_per_epoch = parse_value(line, key, value)?,
                    "patch_size" => p.patch_size = parse_value(line, key, value)?,
                    "augment" => {
                        p.augment = if parse_value::<bool>(line, key, value)? {
                            Augment::ALL
                        } else {
                            Augment::NONE
                        }
                    }
                    "seed" => p.seed = parse_value(line, key, value)?,
                    _ => return Err(unknown()),
                }
            }
            "adapt" => {
                let a = &mut self.adapt;
                match key {
                    "steps" => a.steps = parse_value(line, key, value)?,
                    "lr" => a.lr = parse_value(line, key, value)?,
                    "lr_after" => a.lr_after = parse_opt_f64(line, key, value)?,
                    "lr_drop_after" => a.lr_drop_after = parse_value(line, key, value)?,
                    "patches_per_step" => a.patches_per_step = parse_value(line, key, value)?,
                    "patch_size" => a.patch_size = parse_value(line, key, value)?,
                    "batch_size" => a.batch_size = parse_value(line, key, value)?,
                    "loss" => a.loss = wrap(line, value.parse::<LossKind>())?,
                    "mode" => a.mode = wrap(line, value.parse::<AdaptMode>())?,
                    "sigma255" => a.sigma255 = parse_opt_f64(line, key, value)?,
                    "eps_factor" => a.eps_factor = parse_value(line, key, value)?,
                    "probes_per_eval" => a.probes_per_eval = parse_value(line, key, value)?,
                    "mask_fraction" => a.mask_fraction = parse_value(line, key, value)?,
                    "mask_fill" => a.mask_fill = parse_fill(line, key, value)?,
                    "seed" => a.seed = parse_value(line, key, value)?,
                    _ => return Err(unknown()),
                }
            }
            "data" => {
                let d = &mut self.data;
                match key {
                    "count" => d.count = parse_value(line, key, value)?,
                    "size" => d.size = parse_value(line, key, value)?,
                    "shapes" => (d.shapes_lo, d.shapes_hi) = parse_range(line, key, value)?,
                    "seed" => d.seed = parse_value(line, key, value)?,
                    _ => return Err(unknown()),
                }
            }
            "io" => match key {
                "pgm_depth" => self.io.pgm_depth = parse_depth(line, key, value)?,
                _ => return Err(unknown()),
            },
            _ => unreachable!(),
        }
        Ok(())
    }

    /// Checks every section; sigma-dependent adaptation checks are left to
    /// the adaptation entry point, where the noise level may come from
    /// elsewhere.
    pub fn validate(&self) -> Result<()> {
        self.arch.spec()?;
        self.pretrain.validate()?;
        let a = &self.adapt;
        if a.patches_per_step == 0 || a.batch_size == 0 || a.patch_size == 0 || a.probes_per_eval == 0 {
            return Err(Error::invalid(
                "adapt patch count, patch size, batch size and probes must be >= 1",
            ));
        }
        if !(a.eps_factor > 0.0) || !(a.mask_fraction > 0.0 && a.mask_fraction <= 0.5) {
            return Err(Error::invalid("eps_factor must be > 0 and mask_fraction in (0, 0.5]"));
        }
        if self.data.shapes_lo > self.data.shapes_hi || self.data.size < 16 || self.data.count == 0 {
            return Err(Error::invalid("data needs count >= 1, size >= 16 and shapes lo <= hi"));
        }
        Ok(())
    }

    /// Every key with its effective value, in a form [`RunConfig::parse`]
    /// accepts.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let (a, p, d) = (&self.adapt, &self.pretrain, &self.data);
        let _ = writeln!(s, "[arch]");
        let _ = writeln!(s, "preset = {}", self.arch.preset);
        let _ = writeln!(s, "depth = {}", self.arch.depth);
        let _ = writeln!(s, "width = {}", self.arch.width);
        let _ = writeln!(s, "\n[pretrain]");
        let _ = writeln!(s, "epochs = {}", p.epochs);
        let _ = writeln!(s, "lr = {}", p.lr);
        let _ = writeln!(s, "decay_start = {}", p.decay_start);
        let _ = writeln!(s, "decay_every = {}", p.decay_every);
        let _ = writeln!(s, "decay_factor = {}", p.decay_factor);
        let _ = writeln!(s, "sigma255 = {}..{}", p.sigma255_lo, p.sigma255_hi);
        let _ = writeln!(s, "batch_size = {}", p.batch_size);
        let _ = writeln!(s, "patches_per_epoch = {}", p.patches_per_epoch);
        let _ = writeln!(s, "patch_size = {}", p.patch_size);
        let _ = writeln!(s, "augment = {}", p.augment != Augment::NONE);
        let _ = writeln!(s, "seed = {}", p.seed);
        let _ = writeln!(s, "\n[adapt]");
        let _ = writeln!(s, "steps = {}", a.steps);
        let _ = writeln!(s, "lr = {}", a.lr);
        let _ = writeln!(s, "lr_after = {}", opt_text(a.lr_after));
        let _ = writeln!(s, "lr_drop_after = {}", a.lr_drop_after);
        let _ = writeln!(s, "patches_per_step = {}", a.patches_per_step);
        let _ = writeln!(s, "patch_size = {}", a.patch_size);
        let _ = writeln!(s, "batch_size = {}", a.batch_size);
        let _ = writeln!(s, "loss = {}", a.loss);
        let _ = writeln!(s, "mode = {}", a.mode);
        let _ = writeln!(s, "sigma255 = {}", opt_text(a.sigma255));
        let _ = writeln!(s, "eps_factor = {}", a.eps_factor);
        let _ = writeln!(s, "probes_per_eval = {}", a.probes_per_eval);
        let _ = writeln!(s, "mask_fraction = {}", a.mask_fraction);
        let _ = writeln!(s, "mask_fill = {}", fill_name(a.mask_fill));
        let _ = writeln!(s, "seed = {}", a.seed);
        let _ = writeln!(s, "\n[data]");
        let _ = writeln!(s, "count = {}", d.count);
        let _ = writeln!(s, "size = {}", d.size);
        let _ = writeln!(s, "shapes = {}..{}", d.shapes_lo, d.shapes_hi);
        let _ = writeln!(s, "seed = {}", d.seed);
        let _ = writeln!(s, "\n[io]");
        let _ = writeln!(
            s,
            "pgm_depth = {}",
            match self.io.pgm_depth {
                PgmDepth::Eight => 8,
                PgmDepth::Sixteen => 16,
            }
        );
        s
    }

    /// FNV-1a hash of the effective configuration text, as 16 hex digits.
    pub fn hash(&self) -> String {
        format!("{:016x}", fnv1a(self.to_text().as_bytes()))
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
