//! Checkpoints: every parameter as little-endian f32 in one flat file,
//! described by a text manifest.
//!
//! For a base path `p` the files are `p.bin` and `p.manifest`. Manifest
//! lines are `key value` pairs, then one `config key = value` line per run
//! setting, then one line per array:
//! `param <name> <role> <trainable|frozen> <byte offset> <shape, x-joined>`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::nets::Model;
use crate::params::ParamRole;
use crate::tensor::Tensor;

use super::config::TrainConfig;

const MAGIC: &str = "depthpose-checkpoint 1";

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub role: ParamRole,
    pub trainable: bool,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config: TrainConfig,
    pub config_hash: String,
    pub ranks: String,
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn of(model: &Model, config: &TrainConfig, step: u64) -> Self {
        let entries = model
            .store
            .iter()
            .map(|(_, p)| Entry {
                name: p.name.clone(),
                role: p.role,
                trainable: p.trainable,
                shape: p.value.shape().to_vec(),
                values: p.value.data().iter().map(|&v| v as f32).collect(),
            })
            .collect();
        Self {
            step,
            config: config.clone(),
            config_hash: config.hash(),
            ranks: model.injection.as_ref().map(|i| i.ranks.to_string()).unwrap_or_default(),
            entries,
        }
    }

    pub fn scalar_count(&self, trainable: bool) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable == trainable)
            .map(|e| e.values.len())
            .sum()
    }

    pub fn manifest(&self) -> String {
        let c = &self.config;
        let mut s = String::new();
        let _ = writeln!(s, "{MAGIC}");
        let _ = writeln!(s, "step {}", self.step);
        let _ = writeln!(s, "seed {}", c.seed);
        let _ = writeln!(s, "config_hash {}", self.config_hash);
        let _ = writeln!(s, "scheme {}", c.net.scheme.mode);
        let _ = writeln!(s, "rank_policy {}", c.net.rank_policy);
        let _ = writeln!(s, "ranks {}", self.ranks);
        let _ = writeln!(s, "cross_attention {}", c.net.adapt_cross_attention);
        let _ = writeln!(s, "trainable_scalars {}", self.scalar_count(true));
        let _ = writeln!(s, "frozen_scalars {}", self.scalar_count(false));
        for line in c.to_text().lines() {
            let _ = writeln!(s, "config {line}");
        }
        let mut offset = 0;
        for e in &self.entries {
            let shape: Vec<String> = e.shape.iter().map(|d| d.to_string()).collect();
            let _ = writeln!(
                s,
                "param {} {} {} {} {}",
                e.name,
                e.role.as_str(),
                if e.trainable { "trainable" } else { "frozen" },
                offset,
                shape.join("x")
            );
            offset += e.values.len() * 4;
        }
        s
    }

    pub fn data(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.entries.iter().map(|e| e.values.len() * 4).sum());
        for e in &self.entries {
            for v in &e.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn parse(manifest: &str, data: &[u8]) -> Result<Self> {
        let mut lines = manifest.split_inclusive('\n').scan(0usize, |off, l| {
            let at = *off;
            *off += l.len();
            Some((at, l.trim_end_matches('\n')))
        });
        match lines.next() {
            Some((_, MAGIC)) => {}
            _ => return Err(Error::parse(0, format!("manifest does not start with {MAGIC:?}"))),
        }
        let mut step = None;
        let mut hash = None;
        let mut ranks = String::new();
        let mut config_text = String::new();
        let mut entries = Vec::new();
        let mut expected_offset = 0usize;
        for (at, line) in lines {
            if line.is_empty() {
                continue;
            }
            let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
            match key {
                "step" => step = Some(rest.parse().map_err(|_| Error::parse(at, "step is not an integer"))?),
                "config_hash" => hash = Some(rest.to_string()),
                "ranks" => ranks = rest.to_string(),
                "config" => {
                    config_text.push_str(rest);
                    config_text.push('\n');
                }
                "param" => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    if f.len() != 5 {
                        return Err(Error::parse(at, format!("param line needs 5 fields, found {}", f.len())));
                    }
                    let role = ParamRole::parse(f[1]).ok_or_else(|| Error::parse(at, format!("unknown role {:?}", f[1])))?;
                    let trainable = match f[2] {
                        "trainable" => true,
                        "frozen" => false,
                        other => return Err(Error::parse(at, format!("expected trainable or frozen, found {other:?}"))),
                    };
                    let offset: usize = f[3].parse().map_err(|_| Error::parse(at, "offset is not an integer"))?;
                    let shape: Vec<usize> = f[4]
                        .split('x')
                        .map(|d| d.parse())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| Error::parse(at, format!("bad shape {:?}", f[4])))?;
                    if offset != expected_offset {
                        return Err(Error::parse(at, format!("offset {offset} should be {expected_offset}")));
                    }
                    let n: usize = shape.iter().product();
                    let end = offset + 4 * n;
                    if end > data.len() {
                        return Err(Error::parse(
                            data.len(),
                            format!("array {} needs bytes up to {end}, data file has {}", f[0], data.len()),
                        ));
                    }
                    let values = data[offset..end]
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect();
                    expected_offset = end;
                    entries.push(Entry {
                        name: f[0].to_string(),
                        role,
                        trainable,
                        shape,
                        values,
                    });
                }
                _ => {}
            }
        }
        if expected_offset != data.len() {
            return Err(Error::parse(
                expected_offset,
                format!("data file has {} bytes, manifest describes {expected_offset}", data.len()),
            ));
        }
        let config = TrainConfig::from_text(&config_text)
            .map_err(|e| Error::parse(0, format!("embedded configuration: {e}")))?;
        let config_hash = hash.ok_or_else(|| Error::parse(manifest.len(), "manifest lacks config_hash"))?;
        if config_hash != config.hash() {
            return Err(Error::parse(0, "config_hash does not match the embedded configuration"));
        }
        Ok(Self {
            step: step.ok_or_else(|| Error::parse(manifest.len(), "manifest lacks step"))?,
            config,
            config_hash,
            ranks,
            entries,
        })
    }

    /// Rebuilds the model from the embedded configuration and overwrites
    /// every parameter with the stored values.
    pub fn restore(&self) -> Result<Model> {
        let mut model = Model::build(&self.config.net, self.config.seed)?;
        if model.store.len() != self.entries.len() {
            return Err(Error::parse(
                0,
                format!("checkpoint has {} arrays, model has {}", self.entries.len(), model.store.len()),
            ));
        }
        for e in &self.entries {
            let id = model
                .store
                .id(&e.name)
                .ok_or_else(|| Error::parse(0, format!("model has no parameter {}", e.name)))?;
            if model.store.value(id).shape() != e.shape.as_slice() || model.store.get(id).trainable != e.trainable {
                return Err(Error::parse(0, format!("parameter {} disagrees with the model", e.name)));
            }
            *model.store.value_mut(id) = Tensor::from_vec(&e.shape, e.values.iter().map(|&v| v as f64).collect());
        }
        Ok(model)
    }
}

/// `(p.manifest, p.bin)` for a base path; a directory means `dir/checkpoint`
/// and a path ending in either extension is stripped first.
pub fn checkpoint_paths(path: &Path) -> (PathBuf, PathBuf) {
    let base = if path.is_dir() {
        path.join("checkpoint")
    } else if matches!(path.extension().and_then(|e| e.to_str()), Some("manifest" | "bin")) {
        path.with_extension("")
    } else {
        path.to_path_buf()
    };
    (base.with_extension("manifest"), base.with_extension("bin"))
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let (m, b) = checkpoint_paths(path);
    fs::write(b, ckpt.data())?;
    fs::write(m, ckpt.manifest())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (m, b) = checkpoint_paths(path);
    Checkpoint::parse(&fs::read_to_string(m)?, &fs::read(b)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainConfig {
        let mut c = TrainConfig::default();
        for (k, v) in [
            ("width", "16"),
            ("height", "16"),
            ("patch_size", "4"),
            ("embed_dim", "8"),
            ("num_heads", "2"),
            ("depth_blocks", "1"),
            ("pose_encoder_blocks", "1"),
            ("pose_decoder_blocks", "1"),
            ("pose_hidden", "8"),
            ("base_rank", "2"),
        ] {
            c.set(k, v).unwrap();
        }
        c
    }

    #[test]
    fn save_load_restore_round_trip() {
        let cfg = tiny();
        let model = Model::build(&cfg.net, cfg.seed).unwrap();
        let ck = Checkpoint::of(&model, &cfg, 17);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &ck).unwrap();
        let back = load_checkpoint(&dir.path().join("checkpoint.manifest")).unwrap();
        assert_eq!(back, ck);
        let m2 = back.restore().unwrap();
        for ((_, a), (_, b)) in model.store.iter().zip(m2.store.iter()) {
            assert_eq!(a.name, b.name);
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
        assert!(ck.manifest().contains("scheme truncation-sum"));
        assert!(ck.manifest().contains(&format!("ranks {}", model.injection.unwrap().ranks)));
    }

    #[test]
    fn truncated_data_and_tampered_config_are_parse_errors() {
        let cfg = tiny();
        let model = Model::build(&cfg.net, 0).unwrap();
        let ck = Checkpoint::of(&model, &cfg, 0);
        let data = ck.data();
        assert!(matches!(Checkpoint::parse(&ck.manifest(), &data[..data.len() - 4]), Err(Error::Parse { .. })));
        let tampered = ck.manifest().replace("config batch_size = 4", "config batch_size = 5");
        assert!(matches!(Checkpoint::parse(&tampered, &data), Err(Error::Parse { .. })));
        assert!(matches!(Checkpoint::parse("nonsense\n", &data), Err(Error::Parse { offset: 0, .. })));
    }
}
