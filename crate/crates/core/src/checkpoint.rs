//! Checkpoints: a JSON manifest next to a flat little-endian `f64` blob.
//!
//! The manifest records the configuration, its hash, counters and the name
//! and length of every array in `params.bin`, in file order. Random streams
//! are derived from the root seed and the epoch index, so the epoch counter
//! is all the generator state a resumed run needs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::AdamState;
use crate::trainer::{AgentBundle, TrainConfig};

pub const FORMAT: &str = "csa-checkpoint";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub format_version: u32,
    pub crate_version: String,
    pub config_hash: String,
    pub config: TrainConfig,
    pub epoch: usize,
    pub horizon: usize,
    pub interactions: u64,
    /// Adam step counters: policy, log_std, critic, dynamics, uncertainty.
    pub adam_steps: [u64; 5],
    pub blobs: Vec<BlobEntry>,
    pub params_sha256: String,
}

/// SHA-256 of the configuration's canonical JSON form.
pub fn config_hash(config: &TrainConfig) -> Result<String> {
    let json = serde_json::to_vec(config)?;
    Ok(hex::encode(Sha256::digest(&json)))
}

fn adam_blobs(name: &str, a: &AdamState, out: &mut Vec<(String, Vec<f64>)>) {
    out.push((format!("{name}.m"), a.first_moment.clone()));
    out.push((format!("{name}.v"), a.second_moment.clone()));
    out.push((format!("{name}.hyper"), vec![a.beta1, a.beta2, a.eps]));
}

fn blobs(b: &AgentBundle) -> Vec<(String, Vec<f64>)> {
    let mut out = vec![
        ("policy.mean".to_string(), b.policy.mean.params().to_vec()),
        ("policy.log_std".to_string(), b.policy.log_std.clone()),
        ("critic".to_string(), b.critic.params().to_vec()),
        ("dynamics.net".to_string(), b.dynamics.net.params().to_vec()),
        ("dynamics.input_mean".to_string(), b.dynamics.input_norm.mean.clone()),
        ("dynamics.input_std".to_string(), b.dynamics.input_norm.std.clone()),
        ("dynamics.delta_scale".to_string(), b.dynamics.delta_scale.clone()),
        ("uncertainty.net".to_string(), b.uncertainty.net.params().to_vec()),
        ("uncertainty.input_mean".to_string(), b.uncertainty.input_norm.mean.clone()),
        ("uncertainty.input_std".to_string(), b.uncertainty.input_norm.std.clone()),
        ("uncertainty.radius_scale".to_string(), b.uncertainty.radius_scale.clone()),
    ];
    adam_blobs("adam.policy", &b.optim.policy, &mut out);
    adam_blobs("adam.log_std", &b.optim.log_std, &mut out);
    adam_blobs("adam.critic", &b.optim.critic, &mut out);
    adam_blobs("adam.dynamics", &b.optim.dynamics, &mut out);
    adam_blobs("adam.uncertainty", &b.optim.uncertainty, &mut out);
    out.push(("lambda".to_string(), vec![b.lambda]));
    out.push(("init_states".to_string(), b.init_states.concat()));
    out.push(("dynamics_weights".to_string(), b.dynamics_weights.clone()));
    out.push(("error_scale".to_string(), b.error_scale.clone()));
    out
}

/// Serialised manifest and parameter bytes.
pub fn encode(bundle: &AgentBundle) -> Result<(Vec<u8>, Vec<u8>)> {
    let blobs = blobs(bundle);
    let mut params = Vec::new();
    for (_, values) in &blobs {
        for v in values {
            params.extend_from_slice(&v.to_le_bytes());
        }
    }
    let o = &bundle.optim;
    let manifest = Manifest {
        format: FORMAT.to_string(),
        format_version: FORMAT_VERSION,
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: config_hash(&bundle.config)?,
        config: bundle.config.clone(),
        epoch: bundle.epoch,
        horizon: bundle.horizon,
        interactions: bundle.interactions,
        adam_steps: [
            o.policy.step_count,
            o.log_std.step_count,
            o.critic.step_count,
            o.dynamics.step_count,
            o.uncertainty.step_count,
        ],
        blobs: blobs
            .iter()
            .map(|(name, v)| BlobEntry {
                name: name.clone(),
                len: v.len(),
            })
            .collect(),
        params_sha256: hex::encode(Sha256::digest(&params)),
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    Ok((json, params))
}

pub fn save(bundle: &AgentBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (manifest, params) = encode(bundle)?;
    fs::write(dir.join(PARAMS_FILE), params)?;
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    Ok(())
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Blobs {
    entries: Vec<(String, Vec<f64>)>,
}

impl Blobs {
    fn take(&mut self, name: &str, len: usize) -> Result<Vec<f64>> {
        let i = self
            .entries
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| corrupt(format!("missing array {name}")))?;
        let (_, v) = self.entries.swap_remove(i);
        if v.len() != len {
            return Err(corrupt(format!("array {name} has length {}, expected {len}", v.len())));
        }
        Ok(v)
    }

    fn fill(&mut self, name: &str, target: &mut [f64]) -> Result<()> {
        let v = self.take(name, target.len())?;
        target.copy_from_slice(&v);
        Ok(())
    }

    fn adam(&mut self, name: &str, a: &mut AdamState, steps: u64) -> Result<()> {
        self.fill(&format!("{name}.m"), &mut a.first_moment)?;
        self.fill(&format!("{name}.v"), &mut a.second_moment)?;
        let h = self.take(&format!("{name}.hyper"), 3)?;
        (a.beta1, a.beta2, a.eps, a.step_count) = (h[0], h[1], h[2], steps);
        Ok(())
    }
}

/// Rebuilds a bundle from manifest and parameter bytes.
pub fn decode(manifest: &[u8], params: &[u8]) -> Result<AgentBundle> {
    let m: Manifest = serde_json::from_slice(manifest).map_err(|e| corrupt(format!("bad manifest: {e}")))?;
    if m.format != FORMAT || m.format_version != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported format {} v{}", m.format, m.format_version)));
    }
    if config_hash(&m.config)? != m.config_hash {
        return Err(corrupt("config hash does not match the stored configuration"));
    }
    if hex::encode(Sha256::digest(params)) != m.params_sha256 {
        return Err(corrupt("parameter file checksum mismatch"));
    }
    let total: usize = m.blobs.iter().map(|b| b.len).sum();
    if params.len() != total * 8 {
        return Err(corrupt(format!("parameter file holds {} bytes, manifest lists {}", params.len(), total * 8)));
    }
    let mut values = params
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let mut blobs = Blobs {
        entries: m
            .blobs
            .iter()
            .map(|b| (b.name.clone(), values.by_ref().take(b.len).collect()))
            .collect(),
    };

    let mut b = AgentBundle::skeleton(m.config.clone())?;
    b.epoch = m.epoch;
    b.horizon = m.horizon;
    b.interactions = m.interactions;
    blobs.fill("policy.mean", b.policy.mean.params_mut())?;
    blobs.fill("policy.log_std", &mut b.policy.log_std)?;
    blobs.fill("critic", b.critic.params_mut())?;
    blobs.fill("dynamics.net", b.dynamics.net.params_mut())?;
    blobs.fill("dynamics.input_mean", &mut b.dynamics.input_norm.mean)?;
    blobs.fill("dynamics.input_std", &mut b.dynamics.input_norm.std)?;
    blobs.fill("dynamics.delta_scale", &mut b.dynamics.delta_scale)?;
    blobs.fill("uncertainty.net", b.uncertainty.net.params_mut())?;
    blobs.fill("uncertainty.input_mean", &mut b.uncertainty.input_norm.mean)?;
    blobs.fill("uncertainty.input_std", &mut b.uncertainty.input_norm.std)?;
    blobs.fill("uncertainty.radius_scale", &mut b.uncertainty.radius_scale)?;
    let s = m.adam_steps;
    blobs.adam("adam.policy", &mut b.optim.policy, s[0])?;
    blobs.adam("adam.log_std", &mut b.optim.log_std, s[1])?;
    blobs.adam("adam.critic", &mut b.optim.critic, s[2])?;
    blobs.adam("adam.dynamics", &mut b.optim.dynamics, s[3])?;
    blobs.adam("adam.uncertainty", &mut b.optim.uncertainty, s[4])?;
    b.lambda = blobs.take("lambda", 1)?[0];
    let n = b.dynamics.state_dim();
    let flat = blobs.take("init_states", n * b.init_states.len())?;
    b.init_states = flat.chunks(n.max(1)).map(<[f64]>::to_vec).collect();
    blobs.fill("dynamics_weights", &mut b.dynamics_weights)?;
    blobs.fill("error_scale", &mut b.error_scale)?;
    if let Some((name, _)) = blobs.entries.first() {
        return Err(corrupt(format!("unexpected array {name}")));
    }
    Ok(b)
}

pub fn load(dir: &Path) -> Result<AgentBundle> {
    let read = |name: &str| {
        fs::read(dir.join(name)).map_err(|e| corrupt(format!("cannot read {}: {e}", dir.join(name).display())))
    };
    decode(&read(MANIFEST_FILE)?, &read(PARAMS_FILE)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::EnvKind;
    use crate::trainer::train;

    fn trained() -> AgentBundle {
        let mut c = TrainConfig::default_for(EnvKind::Cartpole);
        c.hidden = vec![5];
        c.dynamics_hidden = vec![6];
        c.steps_per_epoch = 128;
        c.total_interactions = 256;
        c.minibatch = 64;
        c.ppo_epochs = 1;
        c.dynamics_passes = 1;
        c.pretrain_transitions = 300;
        c.pretrain_passes = 2;
        c.init_set_size = 3;
        let (mut b, _) = AgentBundle::initialize(c).unwrap();
        train(&mut b, |_, _| Ok(())).unwrap();
        b
    }

    #[test]
    fn round_trip_is_exact() {
        let b = trained();
        let (m1, p1) = encode(&b).unwrap();
        let back = decode(&m1, &p1).unwrap();
        assert_eq!(back, b);
        let (m2, p2) = encode(&back).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(p1, p2);
    }

    #[test]
    fn files_round_trip() {
        let b = trained();
        let dir = tempfile::tempdir().unwrap();
        save(&b, dir.path()).unwrap();
        assert_eq!(load(dir.path()).unwrap(), b);
    }

    #[test]
    fn tampering_is_detected() {
        let b = trained();
        let (m, mut p) = encode(&b).unwrap();
        p[3] ^= 1;
        assert!(matches!(decode(&m, &p), Err(Error::Checkpoint(_))));
        let (mut m, p) = encode(&b).unwrap();
        let text = String::from_utf8(m.clone()).unwrap().replace("\"gamma\": 0.98", "\"gamma\": 0.5");
        assert_ne!(text.as_bytes(), m.as_slice());
        m = text.into_bytes();
        assert!(matches!(decode(&m, &p), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn missing_directory_fails() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load(&dir.path().join("nope")), Err(Error::Checkpoint(_))));
    }
}
