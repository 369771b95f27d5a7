//! Grad-CAM over named internal layers, heatmap normalization, and PGM
//! rendering of maps and composites.

use std::path::Path;

use crate::data::SampleWindow;
use crate::error::{Error, Result};
use crate::model::SsaUnet;
use crate::nn::blocks::ProbeMap;
use crate::nn::params::Grads;
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// A localization heatmap in [0, 1] at input resolution.
#[derive(Clone, Debug)]
pub struct Heatmap<T> {
    /// (1, 1, H, W) map, min 0 and max 1 unless `all_zero`.
    pub values: Tensor<T>,
    pub layer: String,
    /// Spatial resolution of the source activation before upsampling.
    pub source_hw: (usize, usize),
    /// The raw class-activation map was identically zero.
    pub all_zero: bool,
}

/// relu(sum_k w_k A_k) with w_k the spatial mean of the gradient of
/// channel k; input tensors are (1, k, h, w).
pub fn cam_from_activation<T: Scalar>(
    activation: &Tensor<T>,
    gradient: &Tensor<T>,
) -> Result<Tensor<T>> {
    let s = activation.shape();
    if gradient.shape() != s {
        return Err(Error::dim(format!(
            "activation {} and gradient {} shapes differ",
            s,
            gradient.shape()
        )));
    }
    if s.n != 1 {
        return Err(Error::Usage(
            "grad_cam operates on a single sample (batch 1)".into(),
        ));
    }
    let hw = T::from_f64_lossy((s.h * s.w) as f64);
    let mut cam = Tensor::zeros(Shape::new(1, 1, s.h, s.w)?);
    for k in 0..s.c {
        let mut wk = T::zero();
        for &g in gradient.plane(0, k) {
            wk += g;
        }
        wk = wk / hw;
        for (o, &a) in cam.plane_mut(0, 0).iter_mut().zip(activation.plane(0, k)) {
            *o += wk * a;
        }
    }
    Ok(ops::relu(&cam))
}

/// Min-max normalization to [0, 1]; an all-zero map passes through
/// flagged instead of dividing by zero.
pub fn normalize_heatmap<T: Scalar>(raw: &Tensor<T>) -> (Tensor<T>, bool) {
    let (lo, hi) = raw.min_max();
    if hi == lo {
        if hi == T::zero() {
            return (raw.clone(), true);
        }
        return (Tensor::ones(raw.shape()), false);
    }
    let span = hi - lo;
    (raw.map(|v| (v - lo) / span), false)
}

/// Repeated x2 bilinear upsampling until the map reaches (h, w); the
/// source resolution must divide the target by a power of two.
pub fn upsample_to<T: Scalar>(map: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let mut cur = map.clone();
    while cur.shape().h < h || cur.shape().w < w {
        cur = ops::bilinear_upsample_x2(&cur)?;
    }
    let s = cur.shape();
    if s.h != h || s.w != w {
        return Err(Error::dim(format!(
            "source map {}x{} cannot be upsampled to {h}x{w} by doubling",
            map.shape().h,
            map.shape().w
        )));
    }
    Ok(cur)
}

fn unknown_layer_error(model_layers: &[String], layer: &str) -> Error {
    Error::Usage(format!(
        "unknown layer \"{layer}\"; available layers: {}",
        model_layers.join(", ")
    ))
}

/// Grad-CAM for one layer: the target scalar is the sum over output frame
/// `target_frame`, scaled by `target_scale` (heatmaps are invariant to
/// positive scales).
pub fn grad_cam<T: Scalar>(
    model: &SsaUnet<T>,
    window: &SampleWindow<T>,
    layer: &str,
    target_frame: usize,
    target_scale: f64,
) -> Result<Heatmap<T>> {
    let mut maps = grad_cam_set(model, window, &[layer.to_string()], target_frame, target_scale)?;
    Ok(maps.remove(0))
}

/// One forward and one backward pass computing Grad-CAM for several
/// layers at once.
pub fn grad_cam_set<T: Scalar>(
    model: &SsaUnet<T>,
    window: &SampleWindow<T>,
    layers: &[String],
    target_frame: usize,
    target_scale: f64,
) -> Result<Vec<Heatmap<T>>> {
    let known = model.layer_names();
    for layer in layers {
        if !known.contains(layer) {
            return Err(unknown_layer_error(&known, layer));
        }
    }
    if target_scale <= 0.0 {
        return Err(Error::config("target scale must be positive"));
    }
    let x = &window.inputs;
    let s = x.shape();
    if s.n != 1 {
        return Err(Error::Usage(
            "grad_cam operates on a single sample (batch 1)".into(),
        ));
    }
    let mut activations = ProbeMap::new();
    let (y, ctx) = model.forward_probe(x, Some(&mut activations))?;
    let ys = y.shape();
    if target_frame >= ys.c {
        return Err(Error::config(format!(
            "target frame {target_frame} out of range (model has {} outputs)",
            ys.c
        )));
    }
    let mut grad_out = Tensor::zeros(ys);
    grad_out
        .plane_mut(0, target_frame)
        .fill(T::from_f64_lossy(target_scale));
    let mut grads = Grads::zeros_like(&model.params);
    let mut grad_probes = ProbeMap::new();
    model.backward(ctx, &grad_out, &mut grads, Some(&mut grad_probes))?;

    layers
        .iter()
        .map(|layer| {
            let a = activations
                .get(layer)
                .ok_or_else(|| unknown_layer_error(&known, layer))?;
            let g = grad_probes
                .get(layer)
                .ok_or_else(|| unknown_layer_error(&known, layer))?;
            let raw = cam_from_activation(a, g)?;
            let source_hw = (raw.shape().h, raw.shape().w);
            let upsampled = upsample_to(&raw, s.h, s.w)?;
            let (values, all_zero) = normalize_heatmap(&upsampled);
            Ok(Heatmap {
                values,
                layer: layer.clone(),
                source_hw,
                all_zero,
            })
        })
        .collect()
}

/// Grad-CAM across the default layer set: the block, both separable-conv
/// stages and the attention module of all five encoder levels, plus the
/// four decoder blocks (24 maps).
pub fn explain_sweep<T: Scalar>(
    model: &SsaUnet<T>,
    window: &SampleWindow<T>,
    target_frame: usize,
) -> Result<Vec<Heatmap<T>>> {
    grad_cam_set(model, window, &model.layer_names(), target_frame, 1.0)
}

/// `encoder.level3.conv1` -> `enc_conv1.3`, `decoder.level2.block` ->
/// `dec_block.2`; used for sweep file naming.
pub fn layer_file_stem(layer: &str) -> String {
    let parts: Vec<&str> = layer.split('.').collect();
    if parts.len() == 3 && parts[1].starts_with("level") {
        let side = match parts[0] {
            "encoder" => "enc",
            "decoder" => "dec",
            other => other,
        };
        let level = &parts[1][5..];
        return format!("{side}_{}.{level}", parts[2]);
    }
    layer.replace('.', "_")
}

// ---------------------------------------------------------------------------
// PGM (P5) rendering
// ---------------------------------------------------------------------------

/// 8-bit binary PGM; [0, 1] is quantized linearly to 0..255 (values
/// outside the range are clamped).
pub fn render_pgm<T: Scalar>(map: &Tensor<T>, path: &Path) -> Result<()> {
    let s = map.shape();
    if s.n != 1 || s.c != 1 {
        return Err(Error::dim(format!(
            "PGM rendering needs a (1, 1, h, w) map, got {s}"
        )));
    }
    std::fs::write(path, pgm_bytes(map))?;
    Ok(())
}

fn pgm_bytes<T: Scalar>(map: &Tensor<T>) -> Vec<u8> {
    let s = map.shape();
    let mut out = format!("P5\n{} {}\n255\n", s.w, s.h).into_bytes();
    out.extend(map.data().iter().map(|&v| quantize(v)));
    out
}

fn quantize<T: Scalar>(v: T) -> u8 {
    (v.to_f64_lossy().clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Parses a P5 file written by [`render_pgm`]; values come back as the
/// quantized levels divided by 255.
pub fn parse_pgm<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bytes = std::fs::read(path)?;
    let header_err = |msg: &str| Error::Parse {
        offset: 0,
        message: msg.to_string(),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(&bytes[start..pos]);
    }
    if fields.len() < 4 || fields[0] != b"P5" {
        return Err(header_err("not a P5 PGM"));
    }
    let parse_dim = |raw: &[u8]| -> Result<usize> {
        std::str::from_utf8(raw)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| header_err("bad PGM header field"))
    };
    let w = parse_dim(fields[1])?;
    let h = parse_dim(fields[2])?;
    let maxval = parse_dim(fields[3])?;
    if maxval != 255 {
        return Err(header_err("only maxval 255 is supported"));
    }
    pos += 1; // the single whitespace byte after maxval
    if bytes.len() < pos + h * w {
        return Err(Error::Parse {
            offset: pos as u64,
            message: format!("PGM payload truncated: need {} bytes", h * w),
        });
    }
    let data = bytes[pos..pos + h * w]
        .iter()
        .map(|&b| T::from_f64_lossy(b as f64 / 255.0))
        .collect();
    Tensor::from_vec(Shape::new(1, 1, h, w)?, data)
}

/// Side-by-side composite of several equally-tall maps (input frame,
/// prediction, target, heatmap) into one PGM.
pub fn render_composite<T: Scalar>(maps: &[&Tensor<T>], path: &Path) -> Result<()> {
    if maps.is_empty() {
        return Err(Error::Usage("composite needs at least one map".into()));
    }
    let h = maps[0].shape().h;
    for m in maps {
        let s = m.shape();
        if s.n != 1 || s.c != 1 || s.h != h {
            return Err(Error::dim(
                "composite maps must be (1, 1, h, w) with equal heights",
            ));
        }
    }
    let total_w: usize = maps.iter().map(|m| m.shape().w).sum();
    let mut canvas = Tensor::<T>::zeros(Shape::new(1, 1, h, total_w)?);
    let mut x0 = 0;
    for m in maps {
        let w = m.shape().w;
        for y in 0..h {
            let src = &m.plane(0, 0)[y * w..(y + 1) * w];
            canvas.plane_mut(0, 0)[y * total_w + x0..y * total_w + x0 + w].copy_from_slice(src);
        }
        x0 += w;
    }
    render_pgm(&canvas, path)
}
