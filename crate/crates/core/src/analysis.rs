//! Bridge-weight analysis: per-block Frobenius norms, drift between two
//! checkpoints, and CSV/PGM heatmap export.
//!
//! Each decoder layer's bridge matrix has shape `(l_enc * d_model) x d_model`,
//! so it splits into `l_enc` square blocks stacked by encoder layer. The block
//! Frobenius norm grid (decoder layers x encoder layers) is the canonical
//! summary of where a bridge "listens"; raw-matrix export is also available
//! for close inspection.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::bridge::{BridgeWeights, InitScheme};
use crate::model::ModelConfig;
use crate::tensor::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error("bridge shape mismatch: {detail}")]
    ShapeMismatch { detail: String },
    #[error("failed to write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Grid of block Frobenius norms: rows are decoder layers, columns are
/// encoder layers (column 0 = lowest encoder layer).
#[derive(Debug, Clone, PartialEq)]
pub struct BlockNormMatrix {
    pub l_dec: usize,
    pub l_enc: usize,
    /// Row-major `l_dec x l_enc` values, all `>= 0`.
    pub values: Vec<f64>,
    /// Training step the bridge was captured at (metadata only).
    pub step: u64,
    /// Init scheme the bridge started from, when known (metadata only).
    pub scheme: Option<InitScheme>,
}

impl BlockNormMatrix {
    pub fn at(&self, dec: usize, enc: usize) -> f64 {
        self.values[dec * self.l_enc + enc]
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatmapFormat {
    Csv,
    Pgm,
}

fn check_shapes<S: Scalar>(
    bridge: &BridgeWeights<S>,
    config: &ModelConfig,
) -> Result<(), AnalysisError> {
    if !config.bridge_enabled {
        return Err(AnalysisError::ShapeMismatch {
            detail: "model config has the bridge disabled".into(),
        });
    }
    if bridge.l_enc != config.n_enc_layers
        || bridge.d_model != config.d_model
        || bridge.l_dec() != config.n_dec_layers
    {
        return Err(AnalysisError::ShapeMismatch {
            detail: format!(
                "bridge is {} layers of {}x{} blocks, config wants {} layers of {}x{}",
                bridge.l_dec(),
                bridge.l_enc,
                bridge.d_model,
                config.n_dec_layers,
                config.n_enc_layers,
                config.d_model
            ),
        });
    }
    for (i, w) in bridge.per_decoder_layer.iter().enumerate() {
        let expected = [bridge.l_enc * bridge.d_model, bridge.d_model];
        if w.shape() != expected {
            return Err(AnalysisError::ShapeMismatch {
                detail: format!(
                    "bridge layer {i} has shape {:?}, expected {:?}",
                    w.shape(),
                    expected
                ),
            });
        }
    }
    Ok(())
}

fn block_frobenius<S: Scalar>(weights: &BridgeWeights<S>, dec: usize, enc: usize) -> f64 {
    let d = weights.d_model;
    let w = &weights.per_decoder_layer[dec];
    let data = w.data();
    let mut sum = 0.0f64;
    for r in 0..d {
        let row = (enc * d + r) * d;
        for c in 0..d {
            let v = data[row + c].to_f64();
            sum += v * v;
        }
    }
    sum.sqrt()
}

/// Frobenius norm of every `d_model x d_model` block of every decoder layer's
/// bridge matrix. Accumulation is in 64-bit regardless of the bridge scalar
/// type, so an identity block reports exactly `sqrt(d_model)`.
pub fn block_norms<S: Scalar>(
    bridge: &BridgeWeights<S>,
    config: &ModelConfig,
) -> Result<BlockNormMatrix, AnalysisError> {
    check_shapes(bridge, config)?;
    let (l_dec, l_enc) = (bridge.l_dec(), bridge.l_enc);
    let mut values = Vec::with_capacity(l_dec * l_enc);
    for dec in 0..l_dec {
        for enc in 0..l_enc {
            values.push(block_frobenius(bridge, dec, enc));
        }
    }
    Ok(BlockNormMatrix {
        l_dec,
        l_enc,
        values,
        step: 0,
        scheme: None,
    })
}

/// Per-block Frobenius norm of `after - before`: how far each block moved.
pub fn weight_drift<S: Scalar>(
    before: &BridgeWeights<S>,
    after: &BridgeWeights<S>,
) -> Result<BlockNormMatrix, AnalysisError> {
    if before.l_enc != after.l_enc
        || before.d_model != after.d_model
        || before.l_dec() != after.l_dec()
    {
        return Err(AnalysisError::ShapeMismatch {
            detail: format!(
                "before is {}x{} blocks of width {}, after is {}x{} blocks of width {}",
                before.l_dec(),
                before.l_enc,
                before.d_model,
                after.l_dec(),
                after.l_enc,
                after.d_model
            ),
        });
    }
    let (l_dec, l_enc, d) = (before.l_dec(), before.l_enc, before.d_model);
    let mut values = Vec::with_capacity(l_dec * l_enc);
    for dec in 0..l_dec {
        let a = before.per_decoder_layer[dec].data();
        let b = after.per_decoder_layer[dec].data();
        for enc in 0..l_enc {
            let mut sum = 0.0f64;
            for r in 0..d {
                let row = (enc * d + r) * d;
                for c in 0..d {
                    let delta = b[row + c].to_f64() - a[row + c].to_f64();
                    sum += delta * delta;
                }
            }
            values.push(sum.sqrt());
        }
    }
    Ok(BlockNormMatrix {
        l_dec,
        l_enc,
        values,
        step: 0,
        scheme: None,
    })
}

/// Write the grid as CSV (`enc0..encN` header, one row per decoder layer,
/// 9 significant digits) or as a binary P5 PGM with a `minmax.txt` sidecar.
pub fn export_heatmap(
    m: &BlockNormMatrix,
    path: &Path,
    format: HeatmapFormat,
) -> Result<(), AnalysisError> {
    match format {
        HeatmapFormat::Csv => export_csv(m, path),
        HeatmapFormat::Pgm => export_pgm(m, path, 1),
    }
}

pub fn export_csv(m: &BlockNormMatrix, path: &Path) -> Result<(), AnalysisError> {
    let mut out = String::new();
    let header: Vec<String> = (0..m.l_enc).map(|j| format!("enc{j}")).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for dec in 0..m.l_dec {
        let row: Vec<String> = (0..m.l_enc)
            .map(|enc| format!("{:.8e}", m.at(dec, enc)))
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|source| AnalysisError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Binary P5 PGM, one `scale x scale` pixel block per cell, linearly mapped
/// to `[0, 255]` over the grid's min/max; a `<name>.minmax.txt` sidecar holds
/// the two bounds (LF-separated). When min == max every pixel is 255.
pub fn export_pgm(m: &BlockNormMatrix, path: &Path, scale: usize) -> Result<(), AnalysisError> {
    let scale = scale.max(1);
    let (min, max) = (m.min(), m.max());
    let pixels = grid_to_pixels(&m.values, min, max);
    write_pgm(path, &pixels, m.l_enc, m.l_dec, scale)?;
    write_minmax_sidecar(path, min, max)
}

/// Raw-matrix view of one decoder layer's full `(l_enc*d_model) x d_model`
/// bridge matrix (same scaling and sidecar conventions as [`export_pgm`]).
pub fn export_raw_matrix_pgm<S: Scalar>(
    bridge: &BridgeWeights<S>,
    layer: usize,
    path: &Path,
    scale: usize,
) -> Result<(), AnalysisError> {
    let w = bridge
        .per_decoder_layer
        .get(layer)
        .ok_or_else(|| AnalysisError::ShapeMismatch {
            detail: format!(
                "decoder layer {layer} out of range for a {}-layer bridge",
                bridge.l_dec()
            ),
        })?;
    let values: Vec<f64> = w.data().iter().map(|v| v.to_f64()).collect();
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pixels = grid_to_pixels(&values, min, max);
    write_pgm(path, &pixels, bridge.d_model, bridge.l_enc * bridge.d_model, scale)?;
    write_minmax_sidecar(path, min, max)
}

fn grid_to_pixels(values: &[f64], min: f64, max: f64) -> Vec<u8> {
    let span = max - min;
    values
        .iter()
        .map(|v| {
            if span <= 0.0 {
                255u8
            } else {
                (((v - min) / span * 255.0).round() as i64).clamp(0, 255) as u8
            }
        })
        .collect()
}

fn write_pgm(
    path: &Path,
    pixels: &[u8],
    width: usize,
    height: usize,
    scale: usize,
) -> Result<(), AnalysisError> {
    let io_err = |source| AnalysisError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut file = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    let run = |r: Result<(), std::io::Error>| r.map_err(io_err);
    run(write!(file, "P5\n{} {}\n255\n", width * scale, height * scale))?;
    for row in 0..height {
        let line: Vec<u8> = pixels[row * width..(row + 1) * width]
            .iter()
            .flat_map(|p| std::iter::repeat(*p).take(scale))
            .collect();
        for _ in 0..scale {
            run(file.write_all(&line))?;
        }
    }
    run(file.flush())
}

fn write_minmax_sidecar(pgm_path: &Path, min: f64, max: f64) -> Result<(), AnalysisError> {
    let sidecar = pgm_path.with_extension("minmax.txt");
    std::fs::write(&sidecar, format!("{min}\n{max}\n")).map_err(|source| AnalysisError::Io {
        path: sidecar.clone(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bridge::{init_gca, init_original_connection, init_random_xavier, InitScheme};
    use crate::tensor::Tensor;

    fn config(l_enc: usize, l_dec: usize, d: usize) -> ModelConfig {
        let mut c = ModelConfig::desk(10);
        c.d_model = d;
        c.n_heads = 1;
        c.d_ff = d;
        c.n_enc_layers = l_enc;
        c.n_dec_layers = l_dec;
        c.bridge_enabled = true;
        c
    }

    fn random_bridge(l_enc: usize, l_dec: usize, d: usize, seed: u64) -> BridgeWeights<f64> {
        BridgeWeights::from_scheme(InitScheme::RandomXavier, l_enc, l_dec, d, seed)
    }

    // brute-force oracle: elementwise sum of squares over the block slice
    fn oracle_block_norm(w: &Tensor<f64>, enc: usize, d: usize) -> f64 {
        let mut total = 0.0;
        for r in 0..w.shape()[0] {
            for c in 0..d {
                if r / d == enc {
                    let v = w.data()[r * d + c];
                    total += v * v;
                }
            }
        }
        total.sqrt()
    }

    #[test]
    fn original_connection_rows_are_zero_except_last_sqrt_d_model() {
        let d = 512;
        let bridge = init_original_connection::<f64>(6, 6, d);
        let m = block_norms(&bridge, &config(6, 6, d)).unwrap();
        for dec in 0..6 {
            for enc in 0..5 {
                assert_eq!(m.at(dec, enc), 0.0);
            }
            assert_eq!(m.at(dec, 5), (d as f64).sqrt());
        }
    }

    #[test]
    fn gca_init_is_anti_diagonal_of_sqrt_d_model() {
        let d = 512;
        let bridge = init_gca::<f64>(6, 6, d);
        let m = block_norms(&bridge, &config(6, 6, d)).unwrap();
        for dec in 0..6 {
            for enc in 0..6 {
                let expected = if enc == 5 - dec { (d as f64).sqrt() } else { 0.0 };
                assert_eq!(m.at(dec, enc), expected, "cell ({dec},{enc})");
            }
        }
    }

    #[test]
    fn random_bridge_matches_brute_force_oracle() {
        let (l_enc, l_dec, d) = (3, 4, 16);
        let bridge = random_bridge(l_enc, l_dec, d, 77);
        let m = block_norms(&bridge, &config(l_enc, l_dec, d)).unwrap();
        for dec in 0..l_dec {
            for enc in 0..l_enc {
                let oracle = oracle_block_norm(&bridge.per_decoder_layer[dec], enc, d);
                assert!((m.at(dec, enc) - oracle).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn blockwise_pythagoras_holds() {
        let (l_enc, l_dec, d) = (4, 3, 8);
        let bridge = random_bridge(l_enc, l_dec, d, 5);
        let m = block_norms(&bridge, &config(l_enc, l_dec, d)).unwrap();
        for dec in 0..l_dec {
            let whole: f64 = bridge.per_decoder_layer[dec]
                .data()
                .iter()
                .map(|v| v * v)
                .sum();
            let grid: f64 = (0..l_enc).map(|e| m.at(dec, e) * m.at(dec, e)).sum();
            assert!((whole - grid).abs() < 1e-5 * whole.max(1.0));
        }
    }

    #[test]
    fn block_norms_invariant_under_right_orthogonal_rotation() {
        let (l_enc, l_dec, d) = (2, 2, 8);
        let bridge = random_bridge(l_enc, l_dec, d, 9);
        // Gram-Schmidt on a random d x d matrix gives an orthogonal Q
        let raw = init_random_xavier::<f64>(vec![d, d], 1234);
        let mut q = vec![vec![0.0f64; d]; d];
        for i in 0..d {
            let mut v: Vec<f64> = raw.data()[i * d..(i + 1) * d].to_vec();
            for prev in q.iter().take(i) {
                let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
                for (vv, pp) in v.iter_mut().zip(prev) {
                    *vv -= dot * pp;
                }
            }
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            for (slot, vv) in q[i].iter_mut().zip(&v) {
                *slot = vv / norm;
            }
        }
        // rotate every block simultaneously: W' = W . Q (rows of Q are orthonormal)
        let mut rotated = bridge.clone();
        for w in &mut rotated.per_decoder_layer {
            let rows = w.shape()[0];
            let mut out = vec![0.0f64; rows * d];
            for r in 0..rows {
                for j in 0..d {
                    let mut acc = 0.0;
                    for k in 0..d {
                        acc += w.data()[r * d + k] * q[k][j];
                    }
                    out[r * d + j] = acc;
                }
            }
            *w = Tensor::new(vec![rows, d], out).unwrap();
        }
        let cfg = config(l_enc, l_dec, d);
        let base = block_norms(&bridge, &cfg).unwrap();
        let rot = block_norms(&rotated, &cfg).unwrap();
        for (a, b) in base.values.iter().zip(&rot.values) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let bridge = random_bridge(3, 4, 16, 1);
        assert!(matches!(
            block_norms(&bridge, &config(4, 4, 16)),
            Err(AnalysisError::ShapeMismatch { .. })
        ));
        let mut disabled = config(3, 4, 16);
        disabled.bridge_enabled = false;
        assert!(matches!(
            block_norms(&bridge, &disabled),
            Err(AnalysisError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn drift_of_identical_bridges_is_zero() {
        let bridge = random_bridge(2, 3, 8, 3);
        let m = weight_drift(&bridge, &bridge).unwrap();
        assert!(m.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn drift_sees_a_single_perturbed_block() {
        let (l_enc, l_dec, d) = (3, 3, 8);
        let before = random_bridge(l_enc, l_dec, d, 4);
        let mut after = before.clone();
        let eps = 0.25f64;
        // bump block (dec=1, enc=2) by eps/sqrt(d) on the diagonal: norm = eps
        let per_entry = eps / (d as f64).sqrt();
        {
            let w = &mut after.per_decoder_layer[1];
            let mut data = w.data().to_vec();
            for r in 0..d {
                data[(2 * d + r) * d + r] += per_entry;
            }
            *w = Tensor::new(vec![l_enc * d, d], data).unwrap();
        }
        let m = weight_drift(&before, &after).unwrap();
        for dec in 0..l_dec {
            for enc in 0..l_enc {
                if (dec, enc) == (1, 2) {
                    assert!((m.at(dec, enc) - eps).abs() < 1e-9);
                } else {
                    assert_eq!(m.at(dec, enc), 0.0);
                }
            }
        }
    }

    #[test]
    fn drift_is_symmetric() {
        let a = random_bridge(2, 2, 8, 6);
        let b = random_bridge(2, 2, 8, 7);
        assert_eq!(
            weight_drift(&a, &b).unwrap().values,
            weight_drift(&b, &a).unwrap().values
        );
        assert!(matches!(
            weight_drift(&a, &random_bridge(3, 2, 8, 8)),
            Err(AnalysisError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn csv_round_trips_through_parsing() {
        let bridge = random_bridge(3, 4, 16, 21);
        let m = block_norms(&bridge, &config(3, 4, 16)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("norms.csv");
        export_heatmap(&m, &path, HeatmapFormat::Csv).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "enc0,enc1,enc2");
        let mut parsed = Vec::new();
        for line in lines {
            for field in line.split(',') {
                parsed.push(field.parse::<f64>().unwrap());
            }
        }
        assert_eq!(parsed.len(), m.values.len());
        for (p, v) in parsed.iter().zip(&m.values) {
            // 9 significant digits of precision
            assert!((p - v).abs() <= 1e-8 * v.abs().max(1e-300), "{p} vs {v}");
        }
    }

    #[test]
    fn single_cell_pgm_is_one_pixel_of_255() {
        let m = BlockNormMatrix {
            l_dec: 1,
            l_enc: 1,
            values: vec![3.5],
            step: 0,
            scheme: None,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.pgm");
        export_heatmap(&m, &path, HeatmapFormat::Pgm).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes, b"P5\n1 1\n255\n\xff");
        let sidecar = std::fs::read_to_string(dir.path().join("one.minmax.txt")).unwrap();
        assert_eq!(sidecar, "3.5\n3.5\n");
    }

    #[test]
    fn constant_matrix_maps_to_full_scale() {
        let m = BlockNormMatrix {
            l_dec: 2,
            l_enc: 3,
            values: vec![1.25; 6],
            step: 0,
            scheme: None,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("flat.pgm");
        export_pgm(&m, &path, 1).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let body = &bytes[b"P5\n3 2\n255\n".len()..];
        assert_eq!(body, &[255u8; 6]);
    }

    #[test]
    fn pgm_scaling_and_extremes() {
        let m = BlockNormMatrix {
            l_dec: 1,
            l_enc: 2,
            values: vec![1.0, 3.0],
            step: 0,
            scheme: None,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pair.pgm");
        export_pgm(&m, &path, 3).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header = b"P5\n6 3\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        let body = &bytes[header.len()..];
        assert_eq!(body.len(), 18);
        // min maps to 0, max to 255, upscaled 3x in both directions
        let expect_row = [0u8, 0, 0, 255, 255, 255];
        for r in 0..3 {
            assert_eq!(&body[r * 6..(r + 1) * 6], &expect_row);
        }
    }

    #[test]
    fn raw_matrix_pgm_has_matrix_dimensions() {
        let bridge = random_bridge(2, 2, 8, 30);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("raw.pgm");
        export_raw_matrix_pgm(&bridge, 0, &path, 1).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header = b"P5\n8 16\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 16 * 8);
        assert!(matches!(
            export_raw_matrix_pgm(&bridge, 5, &path, 1),
            Err(AnalysisError::ShapeMismatch { .. })
        ));
    }
}
