//! Convolutional expert with a hand-written backward pass.
//!
//! Architecture: `k` hidden blocks of (3×3 conv, same padding) → per-channel
//! normalization → ReLU → dropout, then a 3×3 head convolution whose output
//! channels are averaged into a single H×W map.
//!
//! All tensors are channel-major `C × h × w` over a [`Window`] of the grid.
//! Outside the grid every activation is held at zero, which reproduces the
//! same-padding of a full-grid pass. With frozen normalization statistics
//! the network is local: the output at `p` only depends on inputs within
//! [`CnnArchitecture::receptive_radius`] cells, so a window of that radius
//! around `p` gives the exact output and parameter gradient at `p`.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::grid::{FieldRaster, GridIndex, GridSpec};

pub const INPUT_CHANNELS: usize = 3;
/// Variance floor inside the normalization layers.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct CnnArchitecture {
    pub hidden_channels: Vec<usize>,
    /// Channels of the head convolution before averaging.
    pub head_channels: usize,
    pub dropout: f64,
}

impl Default for CnnArchitecture {
    fn default() -> Self {
        Self::compact()
    }
}

impl CnnArchitecture {
    /// 16/32/64 feature maps.
    pub fn wide() -> Self {
        Self {
            hidden_channels: vec![16, 32, 64],
            head_channels: 1,
            dropout: 0.1,
        }
    }

    /// Narrow variant used by default on desk-scale grids.
    pub fn compact() -> Self {
        Self {
            hidden_channels: vec![4, 8, 8],
            head_channels: 1,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_channels.is_empty() || self.hidden_channels.contains(&0) {
            return Err(Error::config(
                "cnn_channels",
                "need at least one layer, all widths positive",
            ));
        }
        if self.head_channels == 0 {
            return Err(Error::config("cnn_head_channels", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", "must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Radius (cells) of the output receptive field.
    pub fn receptive_radius(&self) -> usize {
        self.hidden_channels.len() + 1
    }

    pub fn layout(&self) -> CnnLayout {
        let mut next = 0;
        let mut take = |n: usize| {
            let r = next..next + n;
            next += n;
            r
        };
        let mut hidden = Vec::with_capacity(self.hidden_channels.len());
        let mut cin = INPUT_CHANNELS;
        for &cout in &self.hidden_channels {
            let conv = ConvSlots {
                cin,
                cout,
                weight: take(cout * cin * 9),
                bias: take(cout),
            };
            hidden.push(HiddenSlots {
                conv,
                scale: take(cout),
                shift: take(cout),
            });
            cin = cout;
        }
        let head = ConvSlots {
            cin,
            cout: self.head_channels,
            weight: take(self.head_channels * cin * 9),
            bias: take(self.head_channels),
        };
        CnnLayout {
            hidden,
            head,
            total: next,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }

    /// Zero biases and shifts, unit scales, conv weights ~ N(0, 2 / fan_in).
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let layout = self.layout();
        let mut omega = vec![0.0; layout.total];
        let convs = layout
            .hidden
            .iter()
            .map(|h| &h.conv)
            .chain(std::iter::once(&layout.head));
        for conv in convs {
            let sd = (2.0 / (conv.cin * 9) as f64).sqrt();
            let normal = Normal::new(0.0, sd).expect("positive std");
            for w in &mut omega[conv.weight.clone()] {
                *w = normal.sample(rng);
            }
        }
        for h in &layout.hidden {
            omega[h.scale.clone()].fill(1.0);
        }
        omega
    }
}

#[derive(Debug, Clone)]
pub struct ConvSlots {
    pub cin: usize,
    pub cout: usize,
    pub weight: Range<usize>,
    pub bias: Range<usize>,
}

#[derive(Debug, Clone)]
pub struct HiddenSlots {
    pub conv: ConvSlots,
    pub scale: Range<usize>,
    pub shift: Range<usize>,
}

/// Offsets of every tensor inside the flat weight vector.
#[derive(Debug, Clone)]
pub struct CnnLayout {
    pub hidden: Vec<HiddenSlots>,
    pub head: ConvSlots,
    pub total: usize,
}

impl CnnLayout {
    /// Named sub-ranges, used for error reporting and parameter layouts.
    pub fn groups(&self) -> Vec<(String, Range<usize>)> {
        let mut out = Vec::new();
        for (i, h) in self.hidden.iter().enumerate() {
            out.push((format!("omega.conv{}.weight", i + 1), h.conv.weight.clone()));
            out.push((format!("omega.conv{}.bias", i + 1), h.conv.bias.clone()));
            out.push((format!("omega.norm{}.scale", i + 1), h.scale.clone()));
            out.push((format!("omega.norm{}.shift", i + 1), h.shift.clone()));
        }
        out.push(("omega.head.weight".into(), self.head.weight.clone()));
        out.push(("omega.head.bias".into(), self.head.bias.clone()));
        out
    }
}

/// Rectangular region of the grid (may extend past its border).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub r0: isize,
    pub c0: isize,
    pub h: usize,
    pub w: usize,
}

impl Window {
    pub fn full(spec: &GridSpec) -> Self {
        Self {
            r0: 0,
            c0: 0,
            h: spec.height(),
            w: spec.width(),
        }
    }

    pub fn around(p: GridIndex, radius: usize) -> Self {
        Self {
            r0: p.row as isize - radius as isize,
            c0: p.col as isize - radius as isize,
            h: 2 * radius + 1,
            w: 2 * radius + 1,
        }
    }

    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn covers(&self, spec: &GridSpec) -> bool {
        *self == Self::full(spec)
    }

    /// Per-cell flag: does the window cell lie on the grid?
    fn on_grid(&self, spec: &GridSpec) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.len());
        for y in 0..self.h as isize {
            for x in 0..self.w as isize {
                let (r, c) = (self.r0 + y, self.c0 + x);
                out.push(
                    r >= 0 && c >= 0 && (r as usize) < spec.height() && (c as usize) < spec.width(),
                );
            }
        }
        out
    }
}

/// Three-channel network input: standardized heights and the column/row
/// coordinates scaled to [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct CnnInput {
    spec: GridSpec,
    channels: Vec<f64>,
    mask: Vec<bool>,
}

impl CnnInput {
    /// Heights are standardized over all grid cells; a flat height map becomes all zeros.
    pub fn from_heights(heights: &FieldRaster) -> Self {
        let spec = *heights.spec();
        let n = spec.len() as f64;
        let vals = heights.values();
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        let mut channels = Vec::with_capacity(3 * spec.len());
        channels.extend(
            vals.iter()
                .map(|v| if sd > 0.0 { (v - mean) / sd } else { 0.0 }),
        );
        let scale = |k: usize, extent: usize| -1.0 + 2.0 * k as f64 / (extent - 1) as f64;
        for p in spec.indices() {
            channels.push(scale(p.col, spec.width()));
        }
        for p in spec.indices() {
            channels.push(scale(p.row, spec.height()));
        }
        Self {
            spec,
            channels,
            mask: heights.mask().to_vec(),
        }
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn channels(&self) -> &[f64] {
        &self.channels
    }

    pub fn channels_mut(&mut self) -> &mut [f64] {
        &mut self.channels
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    fn extract(&self, win: &Window) -> Vec<f64> {
        if win.covers(&self.spec) {
            return self.channels.clone();
        }
        let hw = self.spec.len();
        let mut out = vec![0.0; INPUT_CHANNELS * win.len()];
        for ch in 0..INPUT_CHANNELS {
            for y in 0..win.h {
                let r = win.r0 + y as isize;
                if r < 0 || r as usize >= self.spec.height() {
                    continue;
                }
                for x in 0..win.w {
                    let c = win.c0 + x as isize;
                    if c < 0 || c as usize >= self.spec.width() {
                        continue;
                    }
                    out[ch * win.len() + y * win.w + x] =
                        self.channels[ch * hw + r as usize * self.spec.width() + c as usize];
                }
            }
        }
        out
    }
}

/// Per-channel normalization statistics of every hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<Vec<f64>>,
    pub inv_std: Vec<Vec<f64>>,
}

/// Inverted-dropout multipliers (0 or `1 / (1 - rate)`) for a full-grid pass.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    layers: Vec<Vec<f64>>,
}

impl DropoutMasks {
    pub fn sample<R: Rng + ?Sized>(arch: &CnnArchitecture, spec: &GridSpec, rng: &mut R) -> Self {
        let keep = 1.0 - arch.dropout;
        let layers = arch
            .hidden_channels
            .iter()
            .map(|&c| {
                (0..c * spec.len())
                    .map(|_| {
                        if rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        Self { layers }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Normalization<'a> {
    /// Statistics from the current full-grid pass (gradients flow through them).
    Batch,
    /// Fixed statistics, treated as constants.
    Frozen(&'a NormStats),
}

#[derive(Debug, Clone, Copy)]
pub enum CnnMode<'a> {
    /// Batch statistics, optional dropout.
    Train { dropout: Option<&'a DropoutMasks> },
    /// Frozen statistics, no dropout.
    Eval(&'a NormStats),
}

/// Saved activations of one forward pass.
#[derive(Debug, Clone)]
pub struct CnnTrace {
    window: Window,
    on_grid: Vec<bool>,
    batch: bool,
    /// `acts[0]` is the input, `acts[l + 1]` the output of hidden block `l`.
    acts: Vec<Vec<f64>>,
    xhat: Vec<Vec<f64>>,
    dropout: Vec<Option<Vec<f64>>>,
    stats: NormStats,
    output: Vec<f64>,
}

impl CnnTrace {
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    pub fn window(&self) -> &Window {
        &self.window
    }

    /// Normalization statistics used by this pass.
    pub fn stats(&self) -> &NormStats {
        &self.stats
    }

    pub fn into_output(self) -> Vec<f64> {
        self.output
    }
}

fn conv3x3(
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    bias: &[f64],
    cout: usize,
) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0; cout * hw];
    for o in 0..cout {
        let out_o = &mut out[o * hw..(o + 1) * hw];
        out_o.fill(bias[o]);
        for i in 0..cin {
            let in_i = &input[i * hw..(i + 1) * hw];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (y0, y1) = ((-dy).max(0) as usize, (h as isize - dy.max(0)) as usize);
                for kx in 0..3 {
                    let wv = weight[((o * cin + i) * 3 + ky) * 3 + kx];
                    let dx = kx as isize - 1;
                    let (x0, x1) = ((-dx).max(0) as usize, (w as isize - dx.max(0)) as usize);
                    for y in y0..y1 {
                        let src_row = (y as isize + dy) as usize * w;
                        let dst = &mut out_o[y * w + x0..y * w + x1];
                        let src =
                            &in_i[(src_row as isize + x0 as isize + dx) as usize..][..x1 - x0];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    cout: usize,
    d_out: &[f64],
    d_weight: &mut [f64],
    d_bias: &mut [f64],
    mut d_input: Option<&mut [f64]>,
) {
    let hw = h * w;
    for o in 0..cout {
        let d_o = &d_out[o * hw..(o + 1) * hw];
        d_bias[o] += d_o.iter().sum::<f64>();
        for i in 0..cin {
            let in_i = &input[i * hw..(i + 1) * hw];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (y0, y1) = ((-dy).max(0) as usize, (h as isize - dy.max(0)) as usize);
                for kx in 0..3 {
                    let widx = ((o * cin + i) * 3 + ky) * 3 + kx;
                    let wv = weight[widx];
                    let dx = kx as isize - 1;
                    let (x0, x1) = ((-dx).max(0) as usize, (w as isize - dx.max(0)) as usize);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let src_start =
                            ((y as isize + dy) as usize * w) as isize + x0 as isize + dx;
                        let g = &d_o[y * w + x0..y * w + x1];
                        let src = &in_i[src_start as usize..][..x1 - x0];
                        acc += g.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                        if let Some(d_in) = d_input.as_deref_mut() {
                            let dst = &mut d_in[i * hw + src_start as usize..][..x1 - x0];
                            for (d, gv) in dst.iter_mut().zip(g) {
                                *d += wv * gv;
                            }
                        }
                    }
                    d_weight[widx] += acc;
                }
            }
        }
    }
}

/// Runs the network over `window`.
///
/// Batch normalization requires the window to cover the whole grid, and
/// dropout masks are only accepted together with batch statistics.
#[allow(clippy::needless_range_loop)]
pub fn forward(
    arch: &CnnArchitecture,
    input: &CnnInput,
    omega: &[f64],
    window: Window,
    norm: Normalization<'_>,
    dropout: Option<&DropoutMasks>,
) -> Result<CnnTrace> {
    let layout = arch.layout();
    if omega.len() != layout.total {
        return Err(Error::ShapeMismatch {
            expected: format!("{} CNN parameters", layout.total),
            actual: omega.len().to_string(),
        });
    }
    let spec = input.spec;
    let batch = matches!(norm, Normalization::Batch);
    if (batch || dropout.is_some()) && !window.covers(&spec) {
        return Err(Error::config(
            "window",
            "batch statistics and dropout need a full-grid window",
        ));
    }
    let (h, w, hw) = (window.h, window.w, window.len());
    let on_grid = window.on_grid(&spec);
    let mut acts = vec![input.extract(&window)];
    let mut xhats = Vec::with_capacity(layout.hidden.len());
    let mut drops = Vec::with_capacity(layout.hidden.len());
    let mut stats = NormStats {
        mean: Vec::new(),
        inv_std: Vec::new(),
    };

    for (l, slots) in layout.hidden.iter().enumerate() {
        let conv = &slots.conv;
        let z = conv3x3(
            &acts[l],
            conv.cin,
            h,
            w,
            &omega[conv.weight.clone()],
            &omega[conv.bias.clone()],
            conv.cout,
        );
        let (mean, inv_std) = match norm {
            Normalization::Batch => {
                let mut mean = Vec::with_capacity(conv.cout);
                let mut inv = Vec::with_capacity(conv.cout);
                for ch in z.chunks(hw) {
                    let m = ch.iter().sum::<f64>() / hw as f64;
                    let v = ch.iter().map(|x| (x - m).powi(2)).sum::<f64>() / hw as f64;
                    mean.push(m);
                    inv.push(1.0 / (v + NORM_EPS).sqrt());
                }
                (mean, inv)
            }
            Normalization::Frozen(s) => {
                if s.mean.len() != layout.hidden.len() || s.mean[l].len() != conv.cout {
                    return Err(Error::ShapeMismatch {
                        expected: "normalization statistics matching the architecture".into(),
                        actual: format!("{} layers", s.mean.len()),
                    });
                }
                (s.mean[l].clone(), s.inv_std[l].clone())
            }
        };
        let scale = &omega[slots.scale.clone()];
        let shift = &omega[slots.shift.clone()];
        let mult = dropout.map(|d| d.layers[l].clone());
        let mut xhat = z;
        let mut a = vec![0.0; conv.cout * hw];
        for c in 0..conv.cout {
            for k in 0..hw {
                let idx = c * hw + k;
                let xh = (xhat[idx] - mean[c]) * inv_std[c];
                xhat[idx] = xh;
                if !on_grid[k] {
                    continue;
                }
                let y = scale[c] * xh + shift[c];
                if y > 0.0 {
                    a[idx] = match &mult {
                        Some(m) => y * m[idx],
                        None => y,
                    };
                }
            }
        }
        stats.mean.push(mean);
        stats.inv_std.push(inv_std);
        xhats.push(xhat);
        drops.push(mult);
        acts.push(a);
    }

    let head = &layout.head;
    let hz = conv3x3(
        acts.last().expect("input is always present"),
        head.cin,
        h,
        w,
        &omega[head.weight.clone()],
        &omega[head.bias.clone()],
        head.cout,
    );
    let mut output = vec![0.0; hw];
    for ch in hz.chunks(hw) {
        for (o, v) in output.iter_mut().zip(ch) {
            *o += v;
        }
    }
    let inv_heads = 1.0 / head.cout as f64;
    output.iter_mut().for_each(|o| *o *= inv_heads);

    Ok(CnnTrace {
        window,
        on_grid,
        batch,
        acts,
        xhat: xhats,
        dropout: drops,
        stats,
        output,
    })
}

/// Gradient of `Σ_k d_out[k] · output[k]` with respect to `omega`.
#[allow(clippy::needless_range_loop)]
pub fn backward(
    arch: &CnnArchitecture,
    trace: &CnnTrace,
    omega: &[f64],
    d_out: &[f64],
) -> Vec<f64> {
    let layout = arch.layout();
    let mut grad = vec![0.0; layout.total];
    let (h, w, hw) = (trace.window.h, trace.window.w, trace.window.len());
    debug_assert_eq!(d_out.len(), hw);

    let head = &layout.head;
    let inv_heads = 1.0 / head.cout as f64;
    let d_hz: Vec<f64> = (0..head.cout)
        .flat_map(|_| d_out.iter().map(|g| g * inv_heads))
        .collect();
    let n_hidden = layout.hidden.len();
    let mut d_act = vec![0.0; head.cin * hw];
    {
        let (gw, rest) = grad.split_at_mut(head.bias.start);
        conv3x3_backward(
            &trace.acts[n_hidden],
            head.cin,
            h,
            w,
            &omega[head.weight.clone()],
            head.cout,
            &d_hz,
            &mut gw[head.weight.clone()],
            &mut rest[..head.cout],
            Some(&mut d_act),
        );
    }

    for l in (0..n_hidden).rev() {
        let slots = &layout.hidden[l];
        let conv = &slots.conv;
        let xhat = &trace.xhat[l];
        let inv_std = &trace.stats.inv_std[l];
        let mult = trace.dropout[l].as_deref();
        let mut d_z = vec![0.0; conv.cout * hw];
        for c in 0..conv.cout {
            let scale = omega[slots.scale.start + c];
            let shift = omega[slots.shift.start + c];
            let mut g_scale = 0.0;
            let mut g_shift = 0.0;
            let dz_c = &mut d_z[c * hw..(c + 1) * hw];
            for k in 0..hw {
                if !trace.on_grid[k] {
                    continue;
                }
                let idx = c * hw + k;
                let y = scale * xhat[idx] + shift;
                if y <= 0.0 {
                    continue;
                }
                let dy = match mult {
                    Some(m) => d_act[idx] * m[idx],
                    None => d_act[idx],
                };
                g_shift += dy;
                g_scale += dy * xhat[idx];
                dz_c[k] = dy * scale;
            }
            grad[slots.shift.start + c] += g_shift;
            grad[slots.scale.start + c] += g_scale;
            // dz_c currently holds d(xhat); map it back through the normalization.
            let is = inv_std[c];
            if trace.batch {
                let n = hw as f64;
                let sum_d: f64 = dz_c.iter().sum();
                let sum_dx: f64 = dz_c
                    .iter()
                    .zip(&xhat[c * hw..(c + 1) * hw])
                    .map(|(a, b)| a * b)
                    .sum();
                for (k, d) in dz_c.iter_mut().enumerate() {
                    *d = is * (*d - sum_d / n - xhat[c * hw + k] * sum_dx / n);
                }
            } else {
                dz_c.iter_mut().for_each(|d| *d *= is);
            }
        }
        let mut d_in = if l > 0 {
            Some(vec![0.0; conv.cin * hw])
        } else {
            None
        };
        let (gw, rest) = grad.split_at_mut(conv.bias.start);
        conv3x3_backward(
            &trace.acts[l],
            conv.cin,
            h,
            w,
            &omega[conv.weight.clone()],
            conv.cout,
            &d_z,
            &mut gw[conv.weight.clone()],
            &mut rest[..conv.cout],
            d_in.as_deref_mut(),
        );
        if let Some(d) = d_in {
            d_act = d;
        }
    }
    grad
}

/// Full-grid network output as a raster (dBW).
pub fn cnn_forward(
    arch: &CnnArchitecture,
    input: &CnnInput,
    omega: &[f64],
    mode: CnnMode<'_>,
) -> Result<FieldRaster> {
    let (norm, dropout) = match mode {
        CnnMode::Train { dropout } => (Normalization::Batch, dropout),
        CnnMode::Eval(stats) => (Normalization::Frozen(stats), None),
    };
    let trace = forward(arch, input, omega, Window::full(&input.spec), norm, dropout)?;
    FieldRaster::new(input.spec, trace.into_output(), input.mask.clone(), "dBW")
}

/// Normalization statistics of a deterministic full-grid pass at `omega`.
pub fn batch_stats(arch: &CnnArchitecture, input: &CnnInput, omega: &[f64]) -> Result<NormStats> {
    let trace = forward(
        arch,
        input,
        omega,
        Window::full(&input.spec),
        Normalization::Batch,
        None,
    )?;
    Ok(trace.stats)
}

/// Output at `p` and its gradient with respect to `omega`, using frozen statistics.
pub fn local_output_grad(
    arch: &CnnArchitecture,
    input: &CnnInput,
    omega: &[f64],
    stats: &NormStats,
    p: GridIndex,
) -> Result<(f64, Vec<f64>)> {
    let radius = arch.receptive_radius();
    let win = Window::around(p, radius);
    let trace = forward(arch, input, omega, win, Normalization::Frozen(stats), None)?;
    let center = radius * win.w + radius;
    let mut d_out = vec![0.0; win.len()];
    d_out[center] = 1.0;
    let grad = backward(arch, &trace, omega, &d_out);
    Ok((trace.output[center], grad))
}
