//! Corpus ingestion, vocabulary building and padded batching.
//!
//! A corpus is a line-delimited manifest (one JSON object per line) pointing
//! at headerless feature files of raw little-endian 32-bit floats, row-major
//! `[T_i × D_i]`, exactly `4·T·D` bytes. Declared shapes must match file
//! sizes exactly; mismatches are corrupt-file errors.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::collections::HashMap;
use std::io::{BufRead, Read, Write};
use std::path::{Path, PathBuf};

/// Reserved token ids.
pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

/// Display forms of the reserved tokens.
pub const RESERVED_TOKENS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// One multi-channel sample: N variable-length feature sequences, optional
/// per-channel anchor label sequences, and the target token sequence.
#[derive(Clone, Debug)]
pub struct MultiChannelSample<F> {
    pub id: String,
    /// Per-channel feature matrices `[T_i × D_i]`; lengths may differ.
    pub channels: Vec<Tensor<F>>,
    /// Per-channel anchor label ids, length `T_i` where present.
    pub anchors: Vec<Option<Vec<usize>>>,
    pub target: Vec<String>,
}

impl<F: Scalar> MultiChannelSample<F> {
    pub fn channel_len(&self, i: usize) -> usize {
        self.channels[i].shape()[0]
    }
}

// ── manifest format ──────────────────────────────────────────────────

#[derive(serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestChannel {
    path: String,
    t: usize,
    d: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    anchors: Option<Vec<usize>>,
}

#[derive(serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLine {
    id: String,
    target: String,
    channels: Vec<ManifestChannel>,
}

/// Write a feature matrix as raw little-endian f32, row-major, no header.
pub fn write_features(path: &Path, features: &Tensor<f32>) -> Result<()> {
    let mut bytes = Vec::with_capacity(features.numel() * 4);
    for &v in features.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Read a feature matrix declared as `[t × d]`; the file must be exactly
/// `4·t·d` bytes.
pub fn read_features<F: Scalar>(path: &Path, t: usize, d: usize) -> Result<Tensor<F>> {
    let mut f = std::fs::File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Corrupt { path: path.display().to_string(), details: "file not found".into() }
        } else {
            Error::Io(e)
        }
    })?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    let expected = 4 * t * d;
    if bytes.len() != expected {
        return Err(Error::Corrupt {
            path: path.display().to_string(),
            details: format!("declared {t}x{d} implies {expected} bytes, file has {}", bytes.len()),
        });
    }
    let data: Vec<F> = bytes
        .chunks_exact(4)
        .map(|c| crate::tensor::cast::<F>(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Tensor::new(vec![t, d], data)
}

/// Load a corpus from a line-delimited manifest. Channel count and feature
/// dims must be consistent across lines; anchor sequences must match their
/// channel's length.
pub fn load_corpus<F: Scalar>(manifest: &Path) -> Result<Vec<MultiChannelSample<F>>> {
    let file = std::fs::File::open(manifest).map_err(|e| {
        Error::Input(format!("cannot open manifest {}: {e}", manifest.display()))
    })?;
    let dir = manifest.parent().unwrap_or_else(|| Path::new("."));
    let mpath = manifest.display().to_string();
    let mut samples = Vec::new();
    let mut dims: Option<Vec<usize>> = None;
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestLine = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            path: mpath.clone(),
            line: lineno + 1,
            details: e.to_string(),
        })?;
        let bad = |details: String| Error::Manifest { path: mpath.clone(), line: lineno + 1, details };
        if entry.channels.is_empty() {
            return Err(bad("sample has no channels".into()));
        }
        let line_dims: Vec<usize> = entry.channels.iter().map(|c| c.d).collect();
        match &dims {
            None => dims = Some(line_dims),
            Some(d) if *d != line_dims => {
                return Err(bad(format!("channel dims {line_dims:?} differ from earlier {d:?}")));
            }
            _ => {}
        }
        let mut channels = Vec::with_capacity(entry.channels.len());
        let mut anchors = Vec::with_capacity(entry.channels.len());
        for ch in &entry.channels {
            if ch.t == 0 {
                return Err(bad(format!("channel {} has zero length", ch.path)));
            }
            if let Some(a) = &ch.anchors {
                if a.len() != ch.t {
                    return Err(bad(format!(
                        "{} anchor labels for {} frames in {}",
                        a.len(),
                        ch.t,
                        ch.path
                    )));
                }
            }
            channels.push(read_features::<F>(&dir.join(&ch.path), ch.t, ch.d)?);
            anchors.push(ch.anchors.clone());
        }
        let target: Vec<String> = entry.target.split_whitespace().map(str::to_string).collect();
        if target.is_empty() {
            return Err(bad("empty target sentence".into()));
        }
        samples.push(MultiChannelSample { id: entry.id, channels, anchors, target });
    }
    if samples.is_empty() {
        return Err(Error::Input(format!("empty corpus: manifest {mpath} has no samples")));
    }
    Ok(samples)
}

/// Write a manifest for samples whose feature files live under `feature_dir`
/// (paths are stored relative to the manifest's directory).
pub fn write_corpus<F: Scalar>(
    manifest: &Path,
    feature_subdir: &str,
    samples: &[MultiChannelSample<F>],
) -> Result<()> {
    let dir = manifest.parent().unwrap_or_else(|| Path::new("."));
    let feat_dir: PathBuf = dir.join(feature_subdir);
    std::fs::create_dir_all(&feat_dir)?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(manifest)?);
    for s in samples {
        let mut channels = Vec::with_capacity(s.channels.len());
        for (i, feats) in s.channels.iter().enumerate() {
            let rel = format!("{feature_subdir}/{}_ch{i}.bin", s.id);
            write_features(&dir.join(&rel), &feats.cast_into::<f32>())?;
            channels.push(ManifestChannel {
                path: rel,
                t: feats.shape()[0],
                d: feats.shape()[1],
                anchors: s.anchors[i].clone(),
            });
        }
        let line = ManifestLine { id: s.id.clone(), target: s.target.join(" "), channels };
        writeln!(out, "{}", serde_json::to_string(&line).expect("manifest serialization"))?;
    }
    Ok(())
}

// ── vocabulary ───────────────────────────────────────────────────────

/// Token ↔ id bijection with fixed reserved ids 0..3.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Build from corpus targets: reserved tokens first, then remaining
    /// tokens ordered by descending frequency with lexicographic tie-break.
    /// Tokens below `min_freq` are dropped (they encode to `<unk>`).
    pub fn build<F: Scalar>(corpus: &[MultiChannelSample<F>], min_freq: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Input("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for s in corpus {
            for tok in &s.target {
                *freq.entry(tok.as_str()).or_default() += 1;
            }
        }
        let mut entries: Vec<(&str, usize)> =
            freq.into_iter().filter(|&(_, n)| n >= min_freq.max(1)).collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(entries.into_iter().map(|(t, _)| t.to_string()));
        Self::from_tokens(tokens)
    }

    /// Rebuild from a stored token list (checkpoint loading).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 4 || tokens[..4] != RESERVED_TOKENS.map(String::from) {
            return Err(Error::Input("vocabulary must start with the 4 reserved tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Input(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn decode(&self, id: u32) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or(Error::VocabRange { id: id as usize, size: self.tokens.len() })
    }

    pub fn encode_tokens(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.encode(t)).collect()
    }

}

// ── batching ─────────────────────────────────────────────────────────

/// One channel of a padded batch: a `[B·T_pad × D]` feature block with zero
/// padding, per-sample lengths, and a key mask marking real positions.
#[derive(Clone, Debug)]
pub struct PaddedChannel<F> {
    pub features: Tensor<F>,
    pub t_pad: usize,
    pub lengths: Vec<usize>,
    /// Row-major `[B × T_pad]`, true at real (non-pad) positions.
    pub mask: Vec<bool>,
    /// Anchor label sequences (real length, not padded) where present.
    pub anchors: Vec<Option<Vec<usize>>>,
}

impl<F: Scalar> PaddedChannel<F> {
    /// Recover one sample's features exactly as loaded.
    pub fn extract_sample(&self, s: usize) -> Tensor<F> {
        let d = *self.features.shape().last().unwrap();
        let len = self.lengths[s];
        let start = s * self.t_pad * d;
        Tensor::new(vec![len, d], self.features.data()[start..start + len * d].to_vec())
            .expect("padded block slice")
    }
}

/// A padded mini-batch with per-channel blocks and wrapped target rows.
#[derive(Clone, Debug)]
pub struct Batch<F> {
    pub ids: Vec<String>,
    pub channels: Vec<PaddedChannel<F>>,
    /// `[B × (U_pad+2)]` target ids wrapped `<bos> … <eos>` then `<pad>`.
    pub targets: Vec<Vec<u32>>,
    /// True at real positions of `targets` (including bos/eos).
    pub target_mask: Vec<Vec<bool>>,
}

impl<F: Scalar> Batch<F> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Decoder input ids for sample `s`: `<bos> t1 … tU` (no eos).
    pub fn decoder_input(&self, s: usize) -> Vec<u32> {
        let real: Vec<u32> = self.real_target(s);
        real[..real.len() - 1].to_vec()
    }

    /// Expected output ids for sample `s`: `t1 … tU <eos>`.
    pub fn decoder_output(&self, s: usize) -> Vec<u32> {
        let real: Vec<u32> = self.real_target(s);
        real[1..].to_vec()
    }

    fn real_target(&self, s: usize) -> Vec<u32> {
        self.targets[s]
            .iter()
            .zip(&self.target_mask[s])
            .filter(|&(_, &m)| m)
            .map(|(&t, _)| t)
            .collect()
    }
}

fn build_batch<F: Scalar>(samples: &[&MultiChannelSample<F>], vocab: &Vocabulary) -> Batch<F> {
    let n_channels = samples[0].channels.len();
    let b = samples.len();
    let mut channels = Vec::with_capacity(n_channels);
    for c in 0..n_channels {
        let d = *samples[0].channels[c].shape().last().unwrap();
        let lengths: Vec<usize> = samples.iter().map(|s| s.channel_len(c)).collect();
        let t_pad = *lengths.iter().max().unwrap();
        let mut data = vec![F::zero(); b * t_pad * d];
        let mut mask = vec![false; b * t_pad];
        for (s, sample) in samples.iter().enumerate() {
            let feats = sample.channels[c].data();
            let len = lengths[s];
            data[s * t_pad * d..s * t_pad * d + len * d].copy_from_slice(feats);
            for t in 0..len {
                mask[s * t_pad + t] = true;
            }
        }
        channels.push(PaddedChannel {
            features: Tensor::new(vec![b * t_pad, d], data).expect("padded block"),
            t_pad,
            lengths,
            mask,
            anchors: samples.iter().map(|s| s.anchors[c].clone()).collect(),
        });
    }
    let wrapped: Vec<Vec<u32>> = samples
        .iter()
        .map(|s| {
            let mut row = vec![BOS];
            row.extend(vocab.encode_tokens(&s.target));
            row.push(EOS);
            row
        })
        .collect();
    let u_pad = wrapped.iter().map(Vec::len).max().unwrap();
    let mut targets = Vec::with_capacity(b);
    let mut target_mask = Vec::with_capacity(b);
    for mut row in wrapped {
        let real = row.len();
        row.resize(u_pad, PAD);
        let mut m = vec![true; real];
        m.resize(u_pad, false);
        targets.push(row);
        target_mask.push(m);
    }
    Batch { ids: samples.iter().map(|s| s.id.clone()).collect(), channels, targets, target_mask }
}

/// Shuffle the corpus with the given seed and group it into padded batches.
/// The final batch may be smaller.
pub fn make_batches<'a, F: Scalar>(
    corpus: &'a [MultiChannelSample<F>],
    vocab: &Vocabulary,
    batch_size: usize,
    seed: u64,
) -> Vec<Batch<F>> {
    assert!(batch_size > 0, "batch size must be positive");
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order
        .chunks(batch_size)
        .map(|chunk| {
            let refs: Vec<&'a MultiChannelSample<F>> = chunk.iter().map(|&i| &corpus[i]).collect();
            build_batch(&refs, vocab)
        })
        .collect()
}

/// A single sample as a batch of one (used for inference).
pub fn single_batch<F: Scalar>(sample: &MultiChannelSample<F>, vocab: &Vocabulary) -> Batch<F> {
    build_batch(&[sample], vocab)
}

/// Keep only the listed channels, in the listed order.
pub fn select_channels<F: Scalar>(
    corpus: Vec<MultiChannelSample<F>>,
    keep: &[usize],
) -> Result<Vec<MultiChannelSample<F>>> {
    if corpus.is_empty() {
        return Ok(corpus);
    }
    let n = corpus[0].channels.len();
    if keep.is_empty() {
        return Err(Error::Config("channel selection must not be empty".into()));
    }
    if let Some(&bad) = keep.iter().find(|&&c| c >= n) {
        return Err(Error::Config(format!("channel index {bad} out of range for {n} channels")));
    }
    Ok(corpus
        .into_iter()
        .map(|mut s| {
            let channels: Vec<Tensor<F>> = keep.iter().map(|&c| s.channels[c].clone()).collect();
            let anchors = keep.iter().map(|&c| s.anchors[c].take()).collect();
            MultiChannelSample { id: s.id, channels, anchors, target: s.target }
        })
        .collect())
}
