//! Weight persistence.
//!
//! File layout: 4-byte magic `QACM`, little-endian u16 version, little-endian
//! u32 header length, a JSON header carrying the model config plus a tensor
//! directory (name, shape, byte offset into the data section), then the raw
//! tensor data as little-endian f64. Round-trips are byte-exact: floats are
//! stored bit-for-bit, and the tensor order is fixed, so saving the same
//! weights twice produces identical files.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numerics::Matrix;

use super::{HeadWeights, LayerWeights, ModelConfig, ModelError, ModelWeights};

const MAGIC: &[u8; 4] = b"QACM";
const VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct FileHeader {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

/// The canonical tensor inventory for a config: (name, shape) in file order.
fn tensor_inventory(c: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = vec![
        ("token_embedding".to_string(), vec![c.vocab_size, c.d_model]),
        ("pos_embedding".to_string(), vec![c.max_seq, c.d_model]),
    ];
    for l in 0..c.n_layers {
        for h in 0..c.n_heads {
            for proj in ["w_q", "w_k", "w_v"] {
                out.push((format!("layers.{l}.heads.{h}.{proj}"), vec![c.d_head, c.d_model]));
            }
            out.push((format!("layers.{l}.heads.{h}.w_o"), vec![c.d_model, c.d_head]));
        }
        out.push((format!("layers.{l}.attn_norm_gain"), vec![c.d_model]));
        out.push((format!("layers.{l}.mlp_in"), vec![c.d_mlp, c.d_model]));
        out.push((format!("layers.{l}.mlp_out"), vec![c.d_model, c.d_mlp]));
        out.push((format!("layers.{l}.mlp_norm_gain"), vec![c.d_model]));
    }
    out.push(("unembedding".to_string(), vec![c.vocab_size, c.d_model]));
    out
}

fn flat_tensors(w: &ModelWeights) -> Vec<&[f64]> {
    let mut out: Vec<&[f64]> = vec![w.token_embedding.data(), w.pos_embedding.data()];
    for layer in &w.layers {
        for head in &layer.heads {
            out.push(head.w_q.data());
            out.push(head.w_k.data());
            out.push(head.w_v.data());
            out.push(head.w_o.data());
        }
        out.push(&layer.attn_norm_gain);
        out.push(layer.mlp_in.data());
        out.push(layer.mlp_out.data());
        out.push(&layer.mlp_norm_gain);
    }
    out.push(w.unembedding.data());
    out
}

/// Serializes weights to `path`. The write is atomic: a temp file in the
/// destination directory is persisted over the target only once complete.
pub fn save_model(weights: &ModelWeights, path: &Path) -> Result<(), ModelError> {
    weights.validate()?;
    let c = &weights.config;
    let inventory = tensor_inventory(c);
    let data = flat_tensors(weights);
    debug_assert_eq!(inventory.len(), data.len());

    let mut offset = 0u64;
    let tensors: Vec<TensorEntry> = inventory
        .into_iter()
        .map(|(name, shape)| {
            let entry = TensorEntry { name, shape: shape.clone(), offset };
            offset += 8 * shape.iter().product::<usize>() as u64;
            entry
        })
        .collect();
    let header = FileHeader { config: c.clone(), tensors };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| ModelError::FormatError(format!("header serialization: {e}")))?;

    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let f = tmp.as_file_mut();
        f.write_all(MAGIC)?;
        f.write_all(&VERSION.to_le_bytes())?;
        f.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
        f.write_all(&header_bytes)?;
        for slice in data {
            for v in slice {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        f.flush()?;
    }
    tmp.persist(path).map_err(|e| ModelError::Io(e.error))?;
    Ok(())
}

/// Loads and validates a weight file. Structural problems (bad magic,
/// version, unparseable or inconsistent header) are `FormatError`; a header
/// that parses but disagrees with the data (wrong shapes, truncation,
/// non-finite values) is `CorruptWeights`.
pub fn load_model(path: &Path) -> Result<ModelWeights, ModelError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 10 {
        return Err(ModelError::FormatError("file shorter than fixed preamble".into()));
    }
    if &bytes[0..4] != MAGIC {
        return Err(ModelError::FormatError(format!(
            "bad magic {:?}, expected {:?}",
            &bytes[0..4],
            MAGIC
        )));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(ModelError::FormatError(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let header_len = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    let data_start = 10 + header_len;
    if bytes.len() < data_start {
        return Err(ModelError::FormatError("header length exceeds file size".into()));
    }
    let header: FileHeader = serde_json::from_slice(&bytes[10..data_start])
        .map_err(|e| ModelError::FormatError(format!("header parse: {e}")))?;
    header
        .config
        .validate()
        .map_err(|e| ModelError::FormatError(format!("header config invalid: {e}")))?;

    let expected = tensor_inventory(&header.config);
    if header.tensors.len() != expected.len() {
        return Err(ModelError::CorruptWeights(format!(
            "tensor directory has {} entries, config implies {}",
            header.tensors.len(),
            expected.len()
        )));
    }
    let data = &bytes[data_start..];
    let mut cursor = 0u64;
    let mut slices: Vec<Vec<f64>> = Vec::with_capacity(expected.len());
    for (entry, (name, shape)) in header.tensors.iter().zip(&expected) {
        if &entry.name != name {
            return Err(ModelError::CorruptWeights(format!(
                "tensor {} out of order, expected {}",
                entry.name, name
            )));
        }
        if &entry.shape != shape {
            return Err(ModelError::CorruptWeights(format!(
                "tensor {} has shape {:?}, config implies {:?}",
                name, entry.shape, shape
            )));
        }
        if entry.offset != cursor {
            return Err(ModelError::CorruptWeights(format!(
                "tensor {} at offset {}, expected {}",
                name, entry.offset, cursor
            )));
        }
        let n = shape.iter().product::<usize>();
        let end = cursor as usize + 8 * n;
        if data.len() < end {
            return Err(ModelError::CorruptWeights(format!(
                "file truncated inside tensor {name}"
            )));
        }
        let mut vals = Vec::with_capacity(n);
        for i in 0..n {
            let at = cursor as usize + 8 * i;
            let mut b = [0u8; 8];
            b.copy_from_slice(&data[at..at + 8]);
            vals.push(f64::from_le_bytes(b));
        }
        slices.push(vals);
        cursor = end as u64;
    }
    if data.len() as u64 != cursor {
        return Err(ModelError::CorruptWeights(format!(
            "{} trailing bytes after last tensor",
            data.len() as u64 - cursor
        )));
    }

    let c = header.config;
    fn next_mat(it: &mut std::vec::IntoIter<Vec<f64>>, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(rows, cols, it.next().expect("inventory length checked"))
            .expect("shape checked against inventory")
    }
    let mut it = slices.into_iter();
    let token_embedding = next_mat(&mut it, c.vocab_size, c.d_model);
    let pos_embedding = next_mat(&mut it, c.max_seq, c.d_model);
    let mut layers = Vec::with_capacity(c.n_layers);
    for _ in 0..c.n_layers {
        let mut heads = Vec::with_capacity(c.n_heads);
        for _ in 0..c.n_heads {
            heads.push(HeadWeights {
                w_q: next_mat(&mut it, c.d_head, c.d_model),
                w_k: next_mat(&mut it, c.d_head, c.d_model),
                w_v: next_mat(&mut it, c.d_head, c.d_model),
                w_o: next_mat(&mut it, c.d_model, c.d_head),
            });
        }
        let attn_norm_gain = it.next().expect("inventory length checked");
        let mlp_in = next_mat(&mut it, c.d_mlp, c.d_model);
        let mlp_out = next_mat(&mut it, c.d_model, c.d_mlp);
        let mlp_norm_gain = it.next().expect("inventory length checked");
        layers.push(LayerWeights { heads, attn_norm_gain, mlp_in, mlp_out, mlp_norm_gain });
    }
    let unembedding = next_mat(&mut it, c.vocab_size, c.d_model);

    let weights =
        ModelWeights { config: c, token_embedding, pos_embedding, layers, unembedding };
    weights.validate()?;
    Ok(weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixture::{build_fixture, FixtureConfig};
    use crate::model::{forward, CaptureSpec, TokenSeq};

    fn fixture() -> ModelWeights {
        build_fixture(&FixtureConfig::default()).unwrap().0
    }

    #[test]
    fn round_trip_preserves_weights_and_logits() {
        let w = fixture();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.qacm");
        save_model(&w, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(w, loaded);

        let seq = TokenSeq::new(vec![6, 5, 25, 7, 1, 2, 5], (0, 4), (4, 7)).unwrap();
        let a = forward(&w, &seq, &CaptureSpec::none()).unwrap();
        let b = forward(&loaded, &seq, &CaptureSpec::none()).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn repeated_saves_are_byte_identical() {
        let w = fixture();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.qacm");
        let p2 = dir.path().join("b.qacm");
        save_model(&w, &p1).unwrap();
        save_model(&w, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn bad_magic_and_version_are_format_errors() {
        let w = fixture();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.qacm");
        save_model(&w, &path).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        let bad = dir.path().join("bad_magic.qacm");
        std::fs::write(&bad, &bytes).unwrap();
        assert!(matches!(load_model(&bad), Err(ModelError::FormatError(_))));

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9;
        let bad = dir.path().join("bad_version.qacm");
        std::fs::write(&bad, &bytes).unwrap();
        assert!(matches!(load_model(&bad), Err(ModelError::FormatError(_))));
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let w = fixture();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.qacm");
        save_model(&w, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.qacm");
        std::fs::write(&cut, &bytes[..bytes.len() - 64]).unwrap();
        assert!(matches!(load_model(&cut), Err(ModelError::CorruptWeights(_))));
    }

    #[test]
    fn inconsistent_header_dimensions_are_format_errors() {
        // Handcraft a file whose config violates d_model = n_heads * d_head.
        let bad_config = ModelConfig {
            n_layers: 1,
            n_heads: 3,
            d_model: 8,
            d_head: 4,
            d_mlp: 4,
            vocab_size: 8,
            max_seq: 8,
            rng_seed: 0,
        };
        let header = FileHeader { config: bad_config, tensors: vec![] };
        let hb = serde_json::to_vec(&header).unwrap();
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&(hb.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&hb);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("inconsistent.qacm");
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_model(&path), Err(ModelError::FormatError(_))));
    }
}
