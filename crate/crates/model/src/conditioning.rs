//! Conditioning signal assembly: two text-embedding streams, a sinusoidal
//! timestep embedding, and a learned dataset-ID row, concatenated in the
//! fixed order seq ‖ global ‖ t ‖ ds.
//!
//! The default embedder maps each whitespace token to a seeded pseudo-random
//! unit vector, standing in for the pretrained sequence/pooled encoders while
//! keeping both streams distinct. An external embedder can be plugged in over
//! line-delimited JSON on stdio.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, Command, Stdio};

use aural_core::{seeded_rng, Tensor};
use serde::Deserialize;

use crate::error::{ModelError, Result};

/// Sequence-stream token cap.
pub const MAX_SEQ_TOKENS: usize = 64;
/// Reserved dataset-ID index used for classifier-free guidance.
pub const NULL_DATASET_INDEX: usize = 0;
pub const NULL_DATASET_ID: &str = "<null>";

/// Registered dataset IDs. Index 0 is always the reserved null ID; real IDs
/// start at 1 in registration order. Immutable after construction.
#[derive(Debug, Clone)]
pub struct DatasetRegistry {
    ids: Vec<String>,
}

impl DatasetRegistry {
    pub fn new(ids: &[String]) -> Result<Self> {
        let mut all = vec![NULL_DATASET_ID.to_string()];
        for id in ids {
            if id == NULL_DATASET_ID || all.contains(id) {
                return Err(ModelError::Config(format!("duplicate or reserved dataset id {id:?}")));
            }
            all.push(id.clone());
        }
        Ok(Self { ids: all })
    }

    pub fn lookup(&self, id: &str) -> Result<usize> {
        self.ids.iter().position(|x| x == id).ok_or_else(|| ModelError::UnknownDatasetId {
            id: id.to_string(),
            registered: self.ids[1..].to_vec(),
        })
    }

    /// Including the reserved null entry.
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn registered(&self) -> &[String] {
        &self.ids[1..]
    }
}

/// Sinusoidal features, frequencies geometric between 1 and 1/10^4.
/// Layout: [sin(t*w_0) .. sin(t*w_{d/2-1}), cos(t*w_0) .. cos(t*w_{d/2-1})].
pub fn timestep_embedding(t: usize, d: usize) -> Tensor {
    assert!(d >= 2 && d % 2 == 0, "need an even embedding width");
    let half = d / 2;
    let mut data = vec![0.0; d];
    for i in 0..half {
        let exponent = if half == 1 { 0.0 } else { i as f64 / (half - 1) as f64 };
        let freq = 10_000f64.powf(-exponent);
        data[i] = (t as f64 * freq).sin();
        data[half + i] = (t as f64 * freq).cos();
    }
    Tensor::new(vec![1, d], data).expect("t embed shape")
}

/// Produces (sequence embedding [S, d], pooled embedding [1, d]).
pub trait TextEmbedder {
    fn embed(&mut self, text: &str) -> Result<(Tensor, Tensor)>;
}

/// Deterministic hash-based embedder: token -> seeded unit vector.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    pub d_c: usize,
}

impl HashEmbedder {
    pub fn new(d_c: usize) -> Self {
        Self { d_c }
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut rng = seeded_rng(fnv1a64(token.as_bytes()));
        let v = Tensor::randn(&[self.d_c], &mut rng);
        let norm = v.l2_norm().max(1e-12);
        v.data().iter().map(|x| x / norm).collect()
    }
}

impl TextEmbedder for HashEmbedder {
    fn embed(&mut self, text: &str) -> Result<(Tensor, Tensor)> {
        let tokens: Vec<&str> = text.split_whitespace().collect();
        if tokens.is_empty() {
            return Ok((Tensor::zeros(&[1, self.d_c]), Tensor::zeros(&[1, self.d_c])));
        }
        // Sequence stream keeps the first MAX_SEQ_TOKENS tokens; the pooled
        // stream averages all tokens so it is order- and cap-independent.
        let mut mean = vec![0.0; self.d_c];
        for tok in &tokens {
            for (m, v) in mean.iter_mut().zip(self.token_vector(tok)) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= tokens.len() as f64;
        }
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let global: Vec<f64> = mean.iter().map(|v| v / norm).collect();

        let kept = &tokens[..tokens.len().min(MAX_SEQ_TOKENS)];
        let mut seq = Vec::with_capacity(kept.len() * self.d_c);
        for tok in kept {
            seq.extend(self.token_vector(tok));
        }
        Ok((
            Tensor::new(vec![kept.len(), self.d_c], seq)?,
            Tensor::new(vec![1, self.d_c], global)?,
        ))
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// External embedder over line-delimited JSON stdio:
/// request `{"text": "..."}`, response `{"seq": [[..]], "global": [..]}`.
pub struct StdioEmbedder {
    child: Child,
    reader: BufReader<std::process::ChildStdout>,
    d_c: usize,
}

#[derive(Deserialize)]
struct EmbedResponse {
    seq: Vec<Vec<f64>>,
    global: Vec<f64>,
}

impl StdioEmbedder {
    pub fn spawn(command: &str, args: &[String], d_c: usize) -> Result<Self> {
        let mut child = Command::new(command)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| ModelError::Embedder(format!("spawn {command}: {e}")))?;
        let stdout = child.stdout.take().expect("piped stdout");
        Ok(Self { child, reader: BufReader::new(stdout), d_c })
    }
}

impl TextEmbedder for StdioEmbedder {
    fn embed(&mut self, text: &str) -> Result<(Tensor, Tensor)> {
        let stdin = self.child.stdin.as_mut().expect("piped stdin");
        let req = serde_json::json!({ "text": text });
        writeln!(stdin, "{req}").map_err(|e| ModelError::Embedder(format!("write: {e}")))?;
        stdin.flush().map_err(|e| ModelError::Embedder(format!("flush: {e}")))?;
        let mut line = String::new();
        self.reader
            .read_line(&mut line)
            .map_err(|e| ModelError::Embedder(format!("read: {e}")))?;
        let resp: EmbedResponse = serde_json::from_str(line.trim())
            .map_err(|e| ModelError::Embedder(format!("decode {line:?}: {e}")))?;
        if resp.seq.is_empty() || resp.seq.iter().any(|r| r.len() != self.d_c) || resp.global.len() != self.d_c
        {
            return Err(ModelError::Embedder(format!(
                "embedding width mismatch, expected {}",
                self.d_c
            )));
        }
        let s = resp.seq.len().min(MAX_SEQ_TOKENS);
        let seq: Vec<f64> = resp.seq[..s].iter().flatten().copied().collect();
        Ok((
            Tensor::new(vec![s, self.d_c], seq)?,
            Tensor::new(vec![1, self.d_c], resp.global)?,
        ))
    }
}

impl Drop for StdioEmbedder {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// The assembled conditioning pieces. The dataset row itself is learned, so
/// the bundle carries its index; `concatenated` takes the resolved row.
#[derive(Debug, Clone)]
pub struct ConditioningBundle {
    pub seq: Tensor,
    pub global: Tensor,
    pub t_embed: Tensor,
    pub dataset_index: usize,
    pub d_c: usize,
}

impl ConditioningBundle {
    pub fn seq_len(&self) -> usize {
        self.seq.shape()[0]
    }

    /// Total rows after concatenation: S + 3.
    pub fn n_rows(&self) -> usize {
        self.seq_len() + 3
    }

    /// seq ‖ global ‖ t ‖ ds as one [S+3, d_c] tensor.
    pub fn concatenated(&self, ds_row: &Tensor) -> Tensor {
        assert_eq!(ds_row.shape(), &[1, self.d_c]);
        let mut data = Vec::with_capacity(self.n_rows() * self.d_c);
        data.extend_from_slice(self.seq.data());
        data.extend_from_slice(self.global.data());
        data.extend_from_slice(self.t_embed.data());
        data.extend_from_slice(ds_row.data());
        Tensor::new(vec![self.n_rows(), self.d_c], data).expect("bundle shape")
    }
}

pub fn build_conditioning_with(
    embedder: &mut dyn TextEmbedder,
    text: &str,
    t: usize,
    dataset_id: &str,
    registry: &DatasetRegistry,
    d_c: usize,
) -> Result<ConditioningBundle> {
    let dataset_index = registry.lookup(dataset_id)?;
    let (seq, global) = embedder.embed(text)?;
    Ok(ConditioningBundle { seq, global, t_embed: timestep_embedding(t, d_c), dataset_index, d_c })
}

/// Hash-stub embedder variant.
pub fn build_conditioning(
    text: &str,
    t: usize,
    dataset_id: &str,
    registry: &DatasetRegistry,
    d_c: usize,
) -> Result<ConditioningBundle> {
    build_conditioning_with(&mut HashEmbedder::new(d_c), text, t, dataset_id, registry, d_c)
}

/// Null text plus the reserved null dataset ID; the timestep stays real.
pub fn null_conditioning(t: usize, d_c: usize) -> ConditioningBundle {
    ConditioningBundle {
        seq: Tensor::zeros(&[1, d_c]),
        global: Tensor::zeros(&[1, d_c]),
        t_embed: timestep_embedding(t, d_c),
        dataset_index: NULL_DATASET_INDEX,
        d_c,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn registry() -> DatasetRegistry {
        DatasetRegistry::new(&["audiocaps".into(), "clotho".into(), "autorecap".into()]).unwrap()
    }

    #[test]
    fn timestep_zero_is_sin0_cos1() {
        let e = timestep_embedding(0, 8);
        assert_eq!(e.shape(), &[1, 8]);
        for i in 0..4 {
            assert_eq!(e.data()[i], 0.0);
            assert_eq!(e.data()[4 + i], 1.0);
        }
    }

    #[test]
    fn timesteps_are_pairwise_distinct() {
        let d = 32;
        let embeds: Vec<Tensor> = (0..1000).map(|t| timestep_embedding(t, d)).collect();
        let mut min_gap = f64::INFINITY;
        for i in 0..embeds.len() {
            for j in i + 1..embeds.len() {
                let gap: f64 = embeds[i]
                    .data()
                    .iter()
                    .zip(embeds[j].data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                min_gap = min_gap.min(gap);
            }
        }
        assert!(min_gap > 0.0, "min pairwise gap {min_gap}");
    }

    #[test]
    fn empty_text_gives_null_embedding() {
        let mut e = HashEmbedder::new(16);
        let (seq, global) = e.embed("").unwrap();
        assert_eq!(seq.shape(), &[1, 16]);
        assert!(seq.data().iter().all(|&v| v == 0.0));
        assert!(global.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hash_embedding_is_deterministic() {
        let mut e = HashEmbedder::new(32);
        let a = e.embed("dog barking").unwrap();
        let b = e.embed("dog barking").unwrap();
        assert_eq!(a.0.data(), b.0.data());
        assert_eq!(a.1.data(), b.1.data());
    }

    #[test]
    fn permutation_changes_seq_but_not_global() {
        let mut e = HashEmbedder::new(32);
        let (seq_a, glob_a) = e.embed("rain on a tin roof").unwrap();
        let (seq_b, glob_b) = e.embed("roof tin a on rain").unwrap();
        assert_ne!(seq_a.data(), seq_b.data());
        for (x, y) in glob_a.data().iter().zip(glob_b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn token_vectors_are_unit_norm() {
        let mut e = HashEmbedder::new(64);
        let (seq, global) = e.embed("thunder").unwrap();
        assert!((seq.l2_norm() - 1.0).abs() < 1e-9);
        assert!((global.l2_norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn bundle_has_s_plus_3_rows() {
        let b = build_conditioning("a b c d e", 10, "audiocaps", &registry(), 16).unwrap();
        assert_eq!(b.seq_len(), 5);
        assert_eq!(b.n_rows(), 8);
        let ds = Tensor::ones(&[1, 16]);
        assert_eq!(b.concatenated(&ds).shape(), &[8, 16]);
    }

    #[test]
    fn unknown_dataset_lists_registered() {
        let err = build_conditioning("x", 0, "nope", &registry(), 16).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("audiocaps") && msg.contains("clotho"), "{msg}");
    }

    #[test]
    fn dataset_ids_differ_only_in_last_row() {
        let reg = registry();
        let a = build_conditioning("dog", 5, "audiocaps", &reg, 16).unwrap();
        let b = build_conditioning("dog", 5, "clotho", &reg, 16).unwrap();
        assert_eq!(a.seq.data(), b.seq.data());
        assert_eq!(a.t_embed.data(), b.t_embed.data());
        assert_ne!(a.dataset_index, b.dataset_index);

        let rows = Tensor::new(vec![1, 16], (0..16).map(|i| i as f64).collect()).unwrap();
        let other = Tensor::new(vec![1, 16], (0..16).map(|i| -(i as f64)).collect()).unwrap();
        let ca = a.concatenated(&rows);
        let cb = b.concatenated(&other);
        let n = ca.numel();
        assert_eq!(&ca.data()[..n - 16], &cb.data()[..n - 16]);
        assert_ne!(&ca.data()[n - 16..], &cb.data()[n - 16..]);
    }

    #[test]
    fn null_bundle_is_text_independent_and_t_dependent() {
        let a = null_conditioning(3, 16);
        let b = null_conditioning(3, 16);
        assert_eq!(a.concatenated(&Tensor::zeros(&[1, 16])).data(), b.concatenated(&Tensor::zeros(&[1, 16])).data());
        assert_eq!(a.dataset_index, NULL_DATASET_INDEX);

        let c = null_conditioning(4, 16);
        assert_ne!(a.t_embed.data(), c.t_embed.data());

        let real = build_conditioning("dog", 3, "audiocaps", &registry(), 16).unwrap();
        assert_ne!(a.concatenated(&Tensor::zeros(&[1, 16])).data(), real.concatenated(&Tensor::zeros(&[1, 16])).data());
    }

    #[test]
    fn concatenation_slices_recover_parts() {
        let b = build_conditioning("wind blows", 7, "audiocaps", &registry(), 16).unwrap();
        let ds = Tensor::ones(&[1, 16]);
        let cat = b.concatenated(&ds);
        let s = b.seq_len();
        assert_eq!(&cat.data()[..s * 16], b.seq.data());
        assert_eq!(&cat.data()[s * 16..(s + 1) * 16], b.global.data());
        assert_eq!(&cat.data()[(s + 1) * 16..(s + 2) * 16], b.t_embed.data());
        assert_eq!(&cat.data()[(s + 2) * 16..], ds.data());
    }
}
