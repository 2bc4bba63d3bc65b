//! Checkpoints are safetensors files: named little-endian f32 tensors plus
//! string metadata holding the format tag, format version, config snapshot and
//! step counter.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{ArrayBase, DataMut, Dimension};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use sha2::{Digest, Sha256};

use super::network::Network;
use super::{EncoderConfig, EncoderState};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const FORMAT_TAG: &str = "ksnn-encoder";

fn tensors(net: &Network) -> Vec<(&'static str, Vec<usize>, &[f32])> {
    fn entry<'a, D: Dimension>(
        name: &'static str,
        a: &'a ArrayBase<ndarray::OwnedRepr<f32>, D>,
    ) -> (&'static str, Vec<usize>, &'a [f32]) {
        (
            name,
            a.shape().to_vec(),
            a.as_slice().expect("standard layout"),
        )
    }
    vec![
        entry("bn1.gamma", &net.bn1.gamma),
        entry("bn1.beta", &net.bn1.beta),
        entry("bn1.running_mean", &net.bn1.running_mean),
        entry("bn1.running_var", &net.bn1.running_var),
        entry("lstm1.kernel", &net.lstm1.kernel),
        entry("lstm1.recurrent_kernel", &net.lstm1.recurrent),
        entry("lstm1.bias", &net.lstm1.bias),
        entry("bn2.gamma", &net.bn2.gamma),
        entry("bn2.beta", &net.bn2.beta),
        entry("bn2.running_mean", &net.bn2.running_mean),
        entry("bn2.running_var", &net.bn2.running_var),
        entry("lstm2.kernel", &net.lstm2.kernel),
        entry("lstm2.recurrent_kernel", &net.lstm2.recurrent),
        entry("lstm2.bias", &net.lstm2.bias),
    ]
}

fn fail(path: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_owned(),
        message: message.into(),
    }
}

pub fn save_state(state: &EncoderState, path: &Path) -> Result<()> {
    let entries = tensors(&state.network);
    let bytes: Vec<(&str, Vec<usize>, Vec<u8>)> = entries
        .into_iter()
        .map(|(name, shape, data)| {
            (
                name,
                shape,
                data.iter().flat_map(|v| v.to_le_bytes()).collect(),
            )
        })
        .collect();
    let views = bytes
        .iter()
        .map(|(name, shape, data)| {
            TensorView::new(Dtype::F32, shape.clone(), data)
                .map(|v| (*name, v))
                .map_err(|e| fail(path, e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let metadata = HashMap::from([
        ("format".to_owned(), FORMAT_TAG.to_owned()),
        (
            "format_version".to_owned(),
            CHECKPOINT_FORMAT_VERSION.to_string(),
        ),
        ("config".to_owned(), serde_json::to_string(&state.config)?),
        ("step".to_owned(), state.step.to_string()),
    ]);
    let buffer =
        safetensors::serialize(views, Some(metadata)).map_err(|e| fail(path, e.to_string()))?;
    // Write-then-rename so a crash never leaves a half-written checkpoint.
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, buffer).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// SHA-256 over the tensor names, shapes and little-endian values plus the
/// config and step. Unlike the file bytes, this does not depend on how the
/// metadata map happens to be ordered.
pub fn state_digest(state: &EncoderState) -> Result<[u8; 32]> {
    let mut h = Sha256::new();
    h.update(FORMAT_TAG.as_bytes());
    h.update(CHECKPOINT_FORMAT_VERSION.to_le_bytes());
    for (name, shape, data) in tensors(&state.network) {
        h.update(name.as_bytes());
        for d in shape {
            h.update((d as u64).to_le_bytes());
        }
        for v in data {
            h.update(v.to_le_bytes());
        }
    }
    h.update(serde_json::to_vec(&state.config)?);
    h.update(state.step.to_le_bytes());
    Ok(h.finalize().into())
}

fn fill<S: DataMut<Elem = f32>, D: Dimension>(
    path: &Path,
    st: &SafeTensors<'_>,
    name: &str,
    dst: &mut ArrayBase<S, D>,
) -> Result<()> {
    let view = st
        .tensor(name)
        .map_err(|_| fail(path, format!("missing tensor `{name}`")))?;
    if view.dtype() != Dtype::F32 {
        return Err(fail(
            path,
            format!("tensor `{name}` has dtype {:?}, expected F32", view.dtype()),
        ));
    }
    if view.shape() != dst.shape() {
        return Err(fail(
            path,
            format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                view.shape(),
                dst.shape()
            ),
        ));
    }
    for (d, chunk) in dst.iter_mut().zip(view.data().chunks_exact(4)) {
        *d = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
    }
    if dst.iter().any(|v| !v.is_finite()) {
        return Err(fail(
            path,
            format!("tensor `{name}` holds non-finite values"),
        ));
    }
    Ok(())
}

/// Loads a checkpoint, validating its version, config and every tensor.
pub fn load_state(path: &Path) -> Result<EncoderState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| fail(path, e.to_string()))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| fail(path, e.to_string()))?;
    let meta = header
        .metadata()
        .as_ref()
        .ok_or_else(|| fail(path, "no metadata block"))?;
    let get = |key: &str| {
        meta.get(key)
            .ok_or_else(|| fail(path, format!("metadata lacks `{key}`")))
    };
    if get("format")? != FORMAT_TAG {
        return Err(fail(
            path,
            format!("not an encoder checkpoint (format `{}`)", get("format")?),
        ));
    }
    let version = get("format_version")?;
    if version != &CHECKPOINT_FORMAT_VERSION.to_string() {
        return Err(fail(
            path,
            format!(
                "format version {version} is not supported (expected {CHECKPOINT_FORMAT_VERSION})"
            ),
        ));
    }
    let config: EncoderConfig = serde_json::from_str(get("config")?)?;
    let step = get("step")?
        .parse()
        .map_err(|_| fail(path, "`step` is not an integer"))?;

    let mut state = EncoderState::init(config)?;
    let net = &mut state.network;
    fill(path, &st, "bn1.gamma", &mut net.bn1.gamma)?;
    fill(path, &st, "bn1.beta", &mut net.bn1.beta)?;
    fill(path, &st, "bn1.running_mean", &mut net.bn1.running_mean)?;
    fill(path, &st, "bn1.running_var", &mut net.bn1.running_var)?;
    fill(path, &st, "lstm1.kernel", &mut net.lstm1.kernel)?;
    fill(
        path,
        &st,
        "lstm1.recurrent_kernel",
        &mut net.lstm1.recurrent,
    )?;
    fill(path, &st, "lstm1.bias", &mut net.lstm1.bias)?;
    fill(path, &st, "bn2.gamma", &mut net.bn2.gamma)?;
    fill(path, &st, "bn2.beta", &mut net.bn2.beta)?;
    fill(path, &st, "bn2.running_mean", &mut net.bn2.running_mean)?;
    fill(path, &st, "bn2.running_var", &mut net.bn2.running_var)?;
    fill(path, &st, "lstm2.kernel", &mut net.lstm2.kernel)?;
    fill(
        path,
        &st,
        "lstm2.recurrent_kernel",
        &mut net.lstm2.recurrent,
    )?;
    fill(path, &st, "lstm2.bias", &mut net.lstm2.bias)?;
    if st.len() != tensors(net).len() {
        return Err(fail(path, format!("unexpected tensor count {}", st.len())));
    }
    state.step = step;
    Ok(state)
}

/// Loads a checkpoint and checks that its input and output shapes match
/// `expected`, naming the first field that differs.
pub fn load_state_compatible(path: &Path, expected: &EncoderConfig) -> Result<EncoderState> {
    let state = load_state(path)?;
    let got = &state.config;
    let fields: [(&str, String, String); 4] = [
        (
            "seq_len",
            got.seq_len.to_string(),
            expected.seq_len.to_string(),
        ),
        (
            "n_features",
            got.n_features.to_string(),
            expected.n_features.to_string(),
        ),
        (
            "embedding_dim",
            got.embedding_dim.to_string(),
            expected.embedding_dim.to_string(),
        ),
        (
            "lstm_units",
            format!("{:?}", got.lstm_units),
            format!("{:?}", expected.lstm_units),
        ),
    ];
    for (field, have, want) in fields {
        if have != want {
            return Err(fail(
                path,
                format!("field `{field}`: checkpoint has {have}, expected {want}"),
            ));
        }
    }
    Ok(state)
}
