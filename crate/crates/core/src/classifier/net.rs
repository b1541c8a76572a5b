use rayon::prelude::*;

use super::{sigmoid, Blocks, CONV_CHANNELS, KERNEL};
use crate::attnfeat::SpanFeature;

/// Probabilities are clamped to `[P_CLAMP, 1 - P_CLAMP]` inside the loss.
pub const P_CLAMP: f64 = 1e-7;

/// A span feature with its binary target.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub feature: SpanFeature,
    pub label: f64,
}

/// Intermediate activations of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    pub k: usize,
    pub z1: Vec<f64>,
    pub a1: Vec<f64>,
    pub z2: Vec<f64>,
    pub pooled: Vec<f64>,
    pub logit: f64,
}

impl Trace {
    /// Smallest |pre-activation| across both conv layers.
    pub fn min_abs_preactivation(&self) -> f64 {
        self.z1
            .iter()
            .chain(&self.z2)
            .fold(f64::INFINITY, |m, z| m.min(z.abs()))
    }
}

/// Valid output rows for kernel offset `d` on a `k`-wide crop with zero border.
#[inline]
fn range_for(d: usize, k: usize) -> (usize, usize) {
    (1usize.saturating_sub(d), (k + 1 - d).min(k))
}

/// `out[f] = b[f] + Σ_c w[f][c] ⋆ x[c]` with 3×3 kernels, stride 1, zero padding 1.
fn conv_forward<W: Copy + Into<f64>>(
    x: &[f64],
    cin: usize,
    k: usize,
    w: &[W],
    b: &[W],
    out: &mut [f64],
) {
    let kk = k * k;
    for (f, o) in out.chunks_exact_mut(kk).enumerate() {
        o.fill(b[f].into());
        for c in 0..cin {
            let xc = &x[c * kk..(c + 1) * kk];
            let wf = &w[(f * cin + c) * KERNEL * KERNEL..];
            for dy in 0..KERNEL {
                let (r_lo, r_hi) = range_for(dy, k);
                for dx in 0..KERNEL {
                    let wv: f64 = wf[dy * KERNEL + dx].into();
                    let (s_lo, s_hi) = range_for(dx, k);
                    for r in r_lo..r_hi {
                        let src = &xc[(r + dy - 1) * k..];
                        let dst = &mut o[r * k..];
                        for s in s_lo..s_hi {
                            dst[s] += wv * src[s + dx - 1];
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates weight and bias gradients, and the input gradient when `dx` is given.
#[allow(clippy::too_many_arguments)]
fn conv_backward<W: Copy + Into<f64>>(
    x: &[f64],
    cin: usize,
    k: usize,
    w: &[W],
    dz: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    mut dx: Option<&mut [f64]>,
) {
    let kk = k * k;
    for (f, dzf) in dz.chunks_exact(kk).enumerate() {
        db[f] += dzf.iter().sum::<f64>();
        for c in 0..cin {
            let xc = &x[c * kk..(c + 1) * kk];
            let base = (f * cin + c) * KERNEL * KERNEL;
            for dy in 0..KERNEL {
                let (r_lo, r_hi) = range_for(dy, k);
                for dxo in 0..KERNEL {
                    let (s_lo, s_hi) = range_for(dxo, k);
                    let mut acc = 0.0;
                    for r in r_lo..r_hi {
                        let src = &xc[(r + dy - 1) * k..];
                        let g = &dzf[r * k..];
                        for s in s_lo..s_hi {
                            acc += g[s] * src[s + dxo - 1];
                        }
                    }
                    dw[base + dy * KERNEL + dxo] += acc;
                    if let Some(dx) = dx.as_deref_mut() {
                        let wv: f64 = w[base + dy * KERNEL + dxo].into();
                        let dxc = &mut dx[c * kk..(c + 1) * kk];
                        for r in r_lo..r_hi {
                            let g = &dzf[r * k..];
                            let dst = &mut dxc[(r + dy - 1) * k..];
                            for s in s_lo..s_hi {
                                dst[s + dxo - 1] += wv * g[s];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Full forward pass keeping every activation.
pub fn forward_trace<W: Copy + Into<f64>>(
    blocks: &Blocks<W>,
    cin: usize,
    feature: &SpanFeature,
) -> Trace {
    let k = feature.size;
    let kk = k * k;
    let x: Vec<f64> = feature.values.iter().map(|&v| f64::from(v)).collect();
    let mut z1 = vec![0.0; CONV_CHANNELS * kk];
    conv_forward(&x, cin, k, &blocks.conv1_w, &blocks.conv1_b, &mut z1);
    let a1: Vec<f64> = z1.iter().map(|&z| z.max(0.0)).collect();
    let mut z2 = vec![0.0; CONV_CHANNELS * kk];
    conv_forward(
        &a1,
        CONV_CHANNELS,
        k,
        &blocks.conv2_w,
        &blocks.conv2_b,
        &mut z2,
    );
    let pooled: Vec<f64> = z2
        .chunks_exact(kk)
        .map(|c| c.iter().map(|&z| z.max(0.0)).sum::<f64>() / kk as f64)
        .collect();
    let logit = blocks.out_b[0].into()
        + pooled
            .iter()
            .zip(&blocks.out_w)
            .map(|(&p, &w)| p * w.into())
            .sum::<f64>();
    Trace {
        k,
        z1,
        a1,
        z2,
        pooled,
        logit,
    }
}

/// The output logit. Shapes are the caller's responsibility.
pub fn forward_logit<W: Copy + Into<f64>>(
    blocks: &Blocks<W>,
    cin: usize,
    feature: &SpanFeature,
) -> f64 {
    forward_trace(blocks, cin, feature).logit
}

/// Clamped binary cross-entropy and dL/dlogit for one prediction.
fn bce(logit: f64, label: f64) -> (f64, f64) {
    let p = sigmoid(logit);
    let pc = p.clamp(P_CLAMP, 1.0 - P_CLAMP);
    let loss = -(label * pc.ln() + (1.0 - label) * (1.0 - pc).ln());
    let grad = if p > P_CLAMP && p < 1.0 - P_CLAMP {
        p - label
    } else {
        0.0
    };
    (loss, grad)
}

fn sample_gradients<W: Copy + Into<f64>>(
    blocks: &Blocks<W>,
    cin: usize,
    ex: &Example,
    scale: f64,
) -> (f64, Blocks<f64>) {
    let t = forward_trace(blocks, cin, &ex.feature);
    let (loss, dlogit) = bce(t.logit, ex.label);
    let dlogit = dlogit * scale;
    let mut g = Blocks::filled(cin, 0.0);
    let k = t.k;
    let kk = k * k;

    g.out_b[0] = dlogit;
    for f in 0..CONV_CHANNELS {
        g.out_w[f] = dlogit * t.pooled[f];
    }
    let mut dz2 = vec![0.0; CONV_CHANNELS * kk];
    for f in 0..CONV_CHANNELS {
        let d = dlogit * blocks.out_w[f].into() / kk as f64;
        let block = f * kk..(f + 1) * kk;
        for (dz, &z) in dz2[block.clone()].iter_mut().zip(&t.z2[block]) {
            if z > 0.0 {
                *dz = d;
            }
        }
    }
    let mut da1 = vec![0.0; CONV_CHANNELS * kk];
    conv_backward(
        &t.a1,
        CONV_CHANNELS,
        k,
        &blocks.conv2_w,
        &dz2,
        &mut g.conv2_w,
        &mut g.conv2_b,
        Some(&mut da1),
    );
    let dz1: Vec<f64> = da1
        .iter()
        .zip(&t.z1)
        .map(|(&d, &z)| if z > 0.0 { d } else { 0.0 })
        .collect();
    let x: Vec<f64> = ex.feature.values.iter().map(|&v| f64::from(v)).collect();
    conv_backward(
        &x,
        cin,
        k,
        &blocks.conv1_w,
        &dz1,
        &mut g.conv1_w,
        &mut g.conv1_b,
        None,
    );
    (loss, g)
}

/// Mean clamped BCE over `batch` and its exact gradient.
///
/// Per-sample gradients may be computed in parallel; they are summed in batch order.
pub fn loss_and_gradients<W: Copy + Into<f64> + Sync>(
    blocks: &Blocks<W>,
    cin: usize,
    batch: &[Example],
) -> (f64, Blocks<f64>) {
    let scale = 1.0 / batch.len().max(1) as f64;
    let per_sample: Vec<(f64, Blocks<f64>)> = batch
        .par_iter()
        .map(|ex| sample_gradients(blocks, cin, ex, scale))
        .collect();
    let mut total = Blocks::filled(cin, 0.0);
    let mut loss = 0.0;
    for (l, g) in per_sample {
        loss += l;
        for ((_, acc), (_, part)) in total.iter_mut().zip(g.iter()) {
            for (a, p) in acc.iter_mut().zip(part) {
                *a += p;
            }
        }
    }
    (loss * scale, total)
}
