//! Checkpoint directories: `manifest.txt` plus `tensors.bin`.
//!
//! The manifest is line oriented:
//!
//! ```text
//! spagan-checkpoint 1
//! config learning_rate=0.0004
//! ...
//! step 120
//! opt_g_t 120
//! opt_d_t 120
//! rng 7 1 4096
//! best_psnr 21.5
//! tensor generator/conv_in/bias f32 8
//! tensor generator/conv_in/weight f32 8x3x3x3
//! ```
//!
//! `tensors.bin` concatenates the little-endian `f32` payloads in manifest
//! order.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{OptimizerState, TrainConfig, TrainState};
use crate::attention_net::{Discriminator, Generator, ParamTree};
use crate::data::tempfile_dir;
use crate::numerics::Tensor;
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "spagan-checkpoint";
const MANIFEST: &str = "manifest.txt";
const PAYLOAD: &str = "tensors.bin";

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Everything stored in a checkpoint directory.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub state: TrainState,
}

fn prefixed<'a>(tree: &'a ParamTree, prefix: &str) -> impl Iterator<Item = (String, Tensor)> + 'a {
    let prefix = prefix.to_string();
    tree.iter().map(move |(n, t)| (format!("{prefix}{n}"), t.clone()))
}

fn strip(tree: &ParamTree, prefix: &str) -> ParamTree {
    tree.iter()
        .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
        .collect()
}

/// Write `state` atomically to `dir`, replacing any previous checkpoint.
pub fn save_checkpoint(dir: &Path, config: &TrainConfig, state: &TrainState) -> Result<()> {
    let mut manifest = format!("{MAGIC} {FORMAT_VERSION}\n");
    for (k, v) in config.to_pairs() {
        manifest += &format!("config {k}={v}\n");
    }
    manifest += &format!("step {}\n", state.step);
    manifest += &format!("opt_g_t {}\n", state.opt_g.t);
    manifest += &format!("opt_d_t {}\n", state.opt_d.t);
    manifest += &format!(
        "rng {} {} {}\n",
        config.seed,
        state.rng.get_stream(),
        state.rng.get_word_pos()
    );
    match state.best_psnr {
        Some(v) => manifest += &format!("best_psnr {v}\n"),
        None => manifest += "best_psnr none\n",
    }

    let tensors: Vec<(String, Tensor)> = prefixed(&state.generator, "")
        .chain(prefixed(&state.discriminator, ""))
        .chain(prefixed(&state.opt_g.m, "adam_g/m/"))
        .chain(prefixed(&state.opt_g.v, "adam_g/v/"))
        .chain(prefixed(&state.opt_d.m, "adam_d/m/"))
        .chain(prefixed(&state.opt_d.v, "adam_d/v/"))
        .collect();
    let mut payload = Vec::new();
    for (name, t) in &tensors {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        manifest += &format!("tensor {name} f32 {}\n", dims.join("x"));
        for &v in t.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }

    let parent = match dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => Path::new(".").to_path_buf(),
    };
    fs::create_dir_all(&parent)?;
    let tmp = tempfile_dir(&parent, dir)?;
    let written = (|| -> Result<()> {
        fs::write(tmp.join(MANIFEST), &manifest)?;
        fs::write(tmp.join(PAYLOAD), &payload)?;
        if dir.exists() {
            fs::remove_dir_all(dir)?;
        }
        fs::rename(&tmp, dir)?;
        Ok(())
    })();
    if written.is_err() {
        let _ = fs::remove_dir_all(&tmp);
    }
    written
}

struct Manifest {
    config_pairs: Vec<(String, String)>,
    step: u64,
    opt_g_t: u64,
    opt_d_t: u64,
    rng: (u64, u64, u128),
    best_psnr: Option<f64>,
    tensors: Vec<(String, Vec<usize>)>,
}

fn parse_num<T: std::str::FromStr>(what: &str, s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| corrupt(format!("bad {what} value `{s}` in manifest")))
}

fn parse_manifest(text: &str) -> Result<Manifest> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| corrupt("empty manifest"))?;
    match header.split_once(' ') {
        Some((MAGIC, v)) => {
            let v: u32 = parse_num("format version", v)?;
            if v != FORMAT_VERSION {
                return Err(corrupt(format!(
                    "unsupported format version {v}, expected {FORMAT_VERSION}"
                )));
            }
        }
        _ => return Err(corrupt("not a checkpoint manifest")),
    }
    let mut m = Manifest {
        config_pairs: Vec::new(),
        step: 0,
        opt_g_t: 0,
        opt_d_t: 0,
        rng: (0, 0, 0),
        best_psnr: None,
        tensors: Vec::new(),
    };
    let mut seen_step = false;
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
        match key {
            "config" => {
                let (k, v) = rest
                    .split_once('=')
                    .ok_or_else(|| corrupt(format!("bad config line `{line}`")))?;
                m.config_pairs.push((k.to_string(), v.to_string()));
            }
            "step" => {
                m.step = parse_num("step", rest)?;
                seen_step = true;
            }
            "opt_g_t" => m.opt_g_t = parse_num("opt_g_t", rest)?,
            "opt_d_t" => m.opt_d_t = parse_num("opt_d_t", rest)?,
            "rng" => {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                if parts.len() != 3 {
                    return Err(corrupt(format!("bad rng line `{line}`")));
                }
                m.rng = (
                    parse_num("rng seed", parts[0])?,
                    parse_num("rng stream", parts[1])?,
                    parse_num("rng position", parts[2])?,
                );
            }
            "best_psnr" => {
                m.best_psnr = match rest {
                    "none" => None,
                    v => Some(parse_num("best_psnr", v)?),
                }
            }
            "tensor" => {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                if parts.len() != 3 || parts[1] != "f32" {
                    return Err(corrupt(format!("bad tensor line `{line}`")));
                }
                let shape = parts[2]
                    .split('x')
                    .map(|d| parse_num("dimension", d))
                    .collect::<Result<Vec<usize>>>()?;
                if shape.contains(&0) {
                    return Err(corrupt(format!("zero dimension in `{line}`")));
                }
                m.tensors.push((parts[0].to_string(), shape));
            }
            other => return Err(corrupt(format!("unknown manifest key `{other}`"))),
        }
    }
    if !seen_step {
        return Err(corrupt("manifest has no step line"));
    }
    Ok(m)
}

/// Read a checkpoint directory. The payload length must match the manifest
/// exactly; nothing is returned on any inconsistency.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(dir.join(MANIFEST))
        .map_err(|e| corrupt(format!("cannot read {}: {e}", dir.join(MANIFEST).display())))?;
    let m = parse_manifest(&text)?;
    let payload = fs::read(dir.join(PAYLOAD))
        .map_err(|e| corrupt(format!("cannot read {}: {e}", dir.join(PAYLOAD).display())))?;
    let expected: usize = m
        .tensors
        .iter()
        .map(|(_, s)| s.iter().product::<usize>() * 4)
        .sum();
    if payload.len() != expected {
        return Err(corrupt(format!(
            "corrupt payload: manifest describes {expected} bytes, tensors.bin has {}",
            payload.len()
        )));
    }
    let mut all = ParamTree::new();
    let mut offset = 0;
    for (name, shape) in &m.tensors {
        let n: usize = shape.iter().product();
        let data = payload[offset..offset + n * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        offset += n * 4;
        if all.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(corrupt(format!("duplicate tensor `{name}`")));
        }
    }
    let config = TrainConfig::from_pairs(&m.config_pairs)?;
    if m.rng.0 != config.seed {
        return Err(corrupt("rng seed differs from config seed"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(m.rng.0);
    rng.set_stream(m.rng.1);
    rng.set_word_pos(m.rng.2);

    let state = TrainState {
        generator: all.filter_prefix("generator/"),
        discriminator: all.filter_prefix("discriminator/"),
        opt_g: OptimizerState {
            m: strip(&all, "adam_g/m/"),
            v: strip(&all, "adam_g/v/"),
            t: m.opt_g_t,
        },
        opt_d: OptimizerState {
            m: strip(&all, "adam_d/m/"),
            v: strip(&all, "adam_d/v/"),
            t: m.opt_d_t,
        },
        step: m.step,
        rng,
        best_psnr: m.best_psnr,
    };
    let gen = Generator::new(config.generator_config())?;
    let disc = Discriminator::new(config.discriminator_config())?;
    gen.init_params(0).check_mirrors(&state.generator)?;
    disc.init_params(0).check_mirrors(&state.discriminator)?;
    state.generator.check_mirrors(&state.opt_g.m)?;
    state.generator.check_mirrors(&state.opt_g.v)?;
    state.discriminator.check_mirrors(&state.opt_d.m)?;
    state.discriminator.check_mirrors(&state.opt_d.v)?;
    Ok(Checkpoint { config, state })
}

/// Load only the generator weights and check them against `generator`.
pub fn load_generator_params(dir: &Path, generator: &Generator) -> Result<ParamTree> {
    let ckpt = load_checkpoint(dir)?;
    generator.init_params(0).check_mirrors(&ckpt.state.generator)?;
    Ok(ckpt.state.generator)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention_net::GeneratorConfig;

    fn small_config() -> TrainConfig {
        TrainConfig {
            gen_width: 4,
            disc_width: 4,
            seed: 3,
            ..TrainConfig::desk()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config();
        let mut state = TrainState::init(&cfg).unwrap();
        state.step = 17;
        state.best_psnr = Some(12.345678901234);
        state.opt_g.t = 17;
        for (_, t) in state.opt_g.m.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.125);
        }
        let _ = rand::Rng::random::<u64>(&mut state.rng);
        let path = dir.path().join("ckpt");
        save_checkpoint(&path, &cfg, &state).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.config, cfg);
        assert_eq!(back.state.generator.fingerprint(), state.generator.fingerprint());
        assert_eq!(back.state.discriminator, state.discriminator);
        assert_eq!(back.state.opt_g, state.opt_g);
        assert_eq!(back.state.opt_d, state.opt_d);
        assert_eq!(back.state.step, 17);
        assert_eq!(back.state.best_psnr, state.best_psnr);
        assert_eq!(back.state.rng, state.rng);
        // overwrite in place
        save_checkpoint(&path, &cfg, &back.state).unwrap();
        assert!(load_checkpoint(&path).is_ok());
    }

    #[test]
    fn truncated_payload_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config();
        let state = TrainState::init(&cfg).unwrap();
        let path = dir.path().join("ckpt");
        save_checkpoint(&path, &cfg, &state).unwrap();
        let bin = path.join(PAYLOAD);
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() - 3]).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("corrupt payload"), "{err}");
    }

    #[test]
    fn version_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config();
        let path = dir.path().join("ckpt");
        save_checkpoint(&path, &cfg, &TrainState::init(&cfg).unwrap()).unwrap();
        let mf = path.join(MANIFEST);
        let text = fs::read_to_string(&mf).unwrap().replacen("checkpoint 1", "checkpoint 9", 1);
        fs::write(&mf, text).unwrap();
        assert!(load_checkpoint(&path).unwrap_err().to_string().contains("version 9"));
    }

    #[test]
    fn width_mismatch_names_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config();
        let path = dir.path().join("ckpt");
        save_checkpoint(&path, &cfg, &TrainState::init(&cfg).unwrap()).unwrap();
        let wide = Generator::new(GeneratorConfig::with_width(32)).unwrap();
        let err = load_generator_params(&path, &wide).unwrap_err().to_string();
        assert!(err.contains("generator/conv_in/bias"), "{err}");
    }
}
