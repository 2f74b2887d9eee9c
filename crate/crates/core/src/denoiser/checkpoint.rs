//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `DISEKPT1`, `u16` version, `u32` header
//! length, UTF-8 `key=value` header lines, then records
//! `[u16 name length][name][u8 rank][u32 × rank dims][f64 payload]`, and a
//! trailing CRC32 of everything before it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{alphabet_from_name, DenoiserError, DenoiserModel, DiffusionSetup, ModelConfig, TrainState};
use crate::nn::Tensor;
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DISEKPT1";
pub const CHECKPOINT_VERSION: u16 = 1;

fn header_text<S: Scalar>(st: &TrainState<S>) -> String {
    let c = st.model.config();
    let prior: Vec<String> = st.setup.prior.iter().map(|p| format!("{p:?}")).collect();
    let fields: Vec<(&str, String)> = vec![
        ("preset", c.preset.clone()),
        ("n_layers", c.n_layers.to_string()),
        ("n_heads", c.n_heads.to_string()),
        ("d_x", c.d_x.to_string()),
        ("d_e", c.d_e.to_string()),
        ("d_y", c.d_y.to_string()),
        ("d_ff_x", c.d_ff_x.to_string()),
        ("d_ff_e", c.d_ff_e.to_string()),
        ("d_ff_y", c.d_ff_y.to_string()),
        ("k_classes", c.k_classes.to_string()),
        ("alphabet", st.model.alphabet().name().to_string()),
        ("scalar", S::NAME.to_string()),
        ("step", st.step.to_string()),
        ("seed", st.seed.to_string()),
        ("lr", format!("{:?}", st.lr)),
        ("weight_decay", format!("{:?}", st.weight_decay)),
        ("t_max", st.setup.t_max.to_string()),
        ("schedule_s", format!("{:?}", st.setup.s)),
        ("prior", prior.join(",")),
        ("modality", st.setup.modality.clone()),
    ];
    fields.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

fn push_record(out: &mut Vec<u8>, name: &str, rows: usize, cols: usize, data: impl Iterator<Item = f64>) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(2);
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes the full training state (weights and both moment buffers).
pub fn checkpoint_bytes<S: Scalar>(st: &TrainState<S>) -> Vec<u8> {
    let header = header_text(st);
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    let model = &st.model;
    for (name, t) in model.names().iter().zip(model.params()) {
        push_record(&mut out, &format!("param/{name}"), t.rows, t.cols, t.data.iter().map(|v| v.f64()));
    }
    for (prefix, buf) in [("adam_m", &st.m), ("adam_v", &st.v)] {
        for ((name, t), mom) in model.names().iter().zip(model.params()).zip(buf) {
            push_record(&mut out, &format!("{prefix}/{name}"), t.rows, t.cols, mom.iter().map(|v| v.f64()));
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn save_checkpoint<S: Scalar>(st: &TrainState<S>, path: &Path) -> Result<(), DenoiserError> {
    fs::write(path, checkpoint_bytes(st)).map_err(|e| DenoiserError::Io(format!("{}: {e}", path.display())))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DenoiserError> {
        if self.buf.len() - self.pos < n {
            return Err(DenoiserError::TruncatedFile);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, DenoiserError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, DenoiserError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn header_field<'h, T: std::str::FromStr>(h: &'h BTreeMap<String, String>, key: &str) -> Result<T, DenoiserError> {
    let raw = h.get(key).ok_or_else(|| DenoiserError::Header(format!("missing `{key}`")))?;
    raw.parse().map_err(|_| DenoiserError::Header(format!("bad value for `{key}`: `{raw}`")))
}

/// Parses checkpoint bytes. Structure is walked first (truncation), then
/// the CRC is verified, then contents are interpreted.
pub fn checkpoint_from_bytes<S: Scalar>(bytes: &[u8]) -> Result<TrainState<S>, DenoiserError> {
    if bytes.len() < CHECKPOINT_MAGIC.len() {
        return Err(if CHECKPOINT_MAGIC.starts_with(bytes) { DenoiserError::TruncatedFile } else { DenoiserError::BadMagic });
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(DenoiserError::BadMagic);
    }
    if bytes.len() < 8 + 2 + 4 + 4 {
        return Err(DenoiserError::TruncatedFile);
    }
    let body = &bytes[..bytes.len() - 4];
    let mut r = Reader { buf: body, pos: 8 };
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(DenoiserError::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
    }
    let hlen = r.u32()? as usize;
    let header_bytes = r.take(hlen)?;
    let mut records: Vec<(String, usize, usize, Vec<f64>)> = Vec::new();
    let mut bad_record = None;
    while r.pos < body.len() {
        let nlen = r.u16()? as usize;
        let name = String::from_utf8_lossy(r.take(nlen)?).into_owned();
        let rank = r.take(1)?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let count: usize = dims.iter().product();
        let payload = r.take(count.checked_mul(8).ok_or(DenoiserError::TruncatedFile)?)?;
        let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let (rows, cols) = match dims.as_slice() {
            [c] => (1, *c),
            [r, c] => (*r, *c),
            _ => {
                bad_record.get_or_insert_with(|| name.clone());
                (0, 0)
            }
        };
        records.push((name, rows, cols, data));
    }
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(DenoiserError::ChecksumMismatch);
    }
    if let Some(name) = bad_record {
        return Err(DenoiserError::ShapeMismatch(format!("record `{name}` has unsupported rank")));
    }

    let text = std::str::from_utf8(header_bytes).map_err(|_| DenoiserError::Header("header is not UTF-8".into()))?;
    let mut h = BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| DenoiserError::Header(format!("bad line `{line}`")))?;
        h.insert(k.to_string(), v.to_string());
    }
    let config = ModelConfig {
        preset: header_field(&h, "preset")?,
        n_layers: header_field(&h, "n_layers")?,
        n_heads: header_field(&h, "n_heads")?,
        d_x: header_field(&h, "d_x")?,
        d_e: header_field(&h, "d_e")?,
        d_y: header_field(&h, "d_y")?,
        d_ff_x: header_field(&h, "d_ff_x")?,
        d_ff_e: header_field(&h, "d_ff_e")?,
        d_ff_y: header_field(&h, "d_ff_y")?,
        k_classes: header_field(&h, "k_classes")?,
    };
    let alpha_name: String = header_field(&h, "alphabet")?;
    let alphabet =
        alphabet_from_name(&alpha_name).ok_or_else(|| DenoiserError::Header(format!("unknown alphabet `{alpha_name}`")))?;
    let prior_text: String = header_field(&h, "prior")?;
    let prior = prior_text
        .split(',')
        .map(|p| p.parse::<f64>().map_err(|_| DenoiserError::Header(format!("bad prior entry `{p}`"))))
        .collect::<Result<Vec<_>, _>>()?;
    let setup = DiffusionSetup {
        t_max: header_field(&h, "t_max")?,
        s: header_field(&h, "schedule_s")?,
        prior,
        modality: header_field(&h, "modality")?,
    };

    let mut by_name: BTreeMap<String, (usize, usize, Vec<f64>)> = BTreeMap::new();
    for (name, rows, cols, data) in records {
        by_name.insert(name, (rows, cols, data));
    }
    let names = DenoiserModel::<S>::new(config.clone(), alphabet, 0)?.names().to_vec();
    let mut fetch = |key: String| {
        by_name
            .remove(&key)
            .map(|(r, c, d)| Tensor::from_vec(r, c, d.into_iter().map(S::of).collect()))
            .ok_or_else(|| DenoiserError::ShapeMismatch(format!("missing tensor `{key}`")))
    };
    let mut named = Vec::with_capacity(names.len());
    let mut m = Vec::with_capacity(names.len());
    let mut v = Vec::with_capacity(names.len());
    for name in &names {
        named.push((name.clone(), fetch(format!("param/{name}"))?));
    }
    for name in &names {
        m.push(fetch(format!("adam_m/{name}"))?.data);
    }
    for name in &names {
        v.push(fetch(format!("adam_v/{name}"))?.data);
    }
    let model = DenoiserModel::from_parts(config, alphabet, named)?;
    for (t, (mm, vv)) in model.params().iter().zip(m.iter().zip(&v)) {
        if mm.len() != t.data.len() || vv.len() != t.data.len() {
            return Err(DenoiserError::ShapeMismatch("moment buffer does not match its parameter".into()));
        }
    }
    Ok(TrainState {
        model,
        m,
        v,
        step: header_field(&h, "step")?,
        lr: header_field(&h, "lr")?,
        weight_decay: header_field(&h, "weight_decay")?,
        seed: header_field(&h, "seed")?,
        setup,
    })
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<TrainState<S>, DenoiserError> {
    let bytes = fs::read(path).map_err(|e| DenoiserError::Io(format!("{}: {e}", path.display())))?;
    checkpoint_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::tests::tiny_config;
    use crate::molgraph::NodeAlphabet;

    fn state() -> TrainState<f64> {
        let model = DenoiserModel::new(tiny_config(), NodeAlphabet::Plain, 3).unwrap();
        let setup = DiffusionSetup { t_max: 40, s: 0.008, prior: vec![0.7, 0.2, 0.05, 0.03, 0.02], modality: "1d".into() };
        let mut st = TrainState::new(model, 77, setup);
        st.step = 12;
        st.m[0][0] = 0.125;
        st.v[1][0] = 1e-9;
        st
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let st = state();
        let bytes = checkpoint_bytes(&st);
        let back: TrainState<f64> = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(back, st);
        assert_eq!(checkpoint_bytes(&back), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = checkpoint_bytes(&state());
        let mut bad = bytes.clone();
        let at = bytes.len() - 20;
        bad[at] ^= 0x40;
        assert_eq!(checkpoint_from_bytes::<f64>(&bad).unwrap_err(), DenoiserError::ChecksumMismatch);

        let mut ver = bytes.clone();
        ver[8] = 2;
        assert!(matches!(checkpoint_from_bytes::<f64>(&ver), Err(DenoiserError::VersionMismatch { found: 2, .. })));

        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert_eq!(checkpoint_from_bytes::<f64>(&magic).unwrap_err(), DenoiserError::BadMagic);

        let cut = &bytes[..bytes.len() - 100];
        assert_eq!(checkpoint_from_bytes::<f64>(cut).unwrap_err(), DenoiserError::TruncatedFile);
    }

    #[test]
    fn f32_state_round_trips() {
        let model = DenoiserModel::<f32>::new(tiny_config(), NodeAlphabet::SuperAtom, 3).unwrap();
        let setup = DiffusionSetup { t_max: 10, s: 0.008, prior: vec![0.5, 0.5], modality: "full".into() };
        let st = TrainState::new(model, 1, setup);
        let back: TrainState<f32> = checkpoint_from_bytes(&checkpoint_bytes(&st)).unwrap();
        assert_eq!(back, st);
    }
}
