//! 2-D convolution kernels (cross-correlation convention) with stride,
//! zero padding, dilation, and channel groups. Layout is `[C, H, W]` for
//! feature maps and `[C_out, C_in/groups, KH, KW]` for kernels.

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

impl Conv2dSpec {
    pub fn padded(padding: usize) -> Self {
        Conv2dSpec {
            padding,
            ..Default::default()
        }
    }
}

/// Validated geometry for one convolution call.
pub(crate) struct ConvDims {
    pub h_in: usize,
    pub w_in: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub h_out: usize,
    pub w_out: usize,
    /// Input channels per group.
    pub cg_in: usize,
    /// Output channels per group.
    pub cg_out: usize,
}

pub(crate) fn check_dims(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    spec: &Conv2dSpec,
) -> Result<ConvDims> {
    const OP: &str = "conv2d";
    if input.rank() != 3 {
        return Err(Error::shape(OP, "input rank 3 [C,H,W]", format!("rank {}", input.rank())));
    }
    if kernel.rank() != 4 {
        return Err(Error::shape(
            OP,
            "kernel rank 4 [C_out,C_in/g,KH,KW]",
            format!("rank {}", kernel.rank()),
        ));
    }
    if spec.stride == 0 || spec.dilation == 0 || spec.groups == 0 {
        return Err(Error::invalid(
            OP,
            format!(
                "stride, dilation, and groups must be positive (stride={}, dilation={}, groups={})",
                spec.stride, spec.dilation, spec.groups
            ),
        ));
    }
    let (c_in, h_in, w_in) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (c_out, ck, kh, kw) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    if c_in % spec.groups != 0 || c_out % spec.groups != 0 {
        return Err(Error::invalid(
            OP,
            format!(
                "groups={} must divide input channels {} and output channels {}",
                spec.groups, c_in, c_out
            ),
        ));
    }
    let cg_in = c_in / spec.groups;
    if ck != cg_in {
        return Err(Error::shape(
            OP,
            format!("kernel in-channels {cg_in} (= C_in/groups)"),
            format!("{ck}"),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(Error::shape(OP, format!("bias [{c_out}]"), format!("{:?}", b.shape())));
        }
    }
    // Effective kernel extent with dilation.
    let eff_kh = spec.dilation * (kh - 1) + 1;
    let eff_kw = spec.dilation * (kw - 1) + 1;
    let h_pad = h_in + 2 * spec.padding;
    let w_pad = w_in + 2 * spec.padding;
    if h_pad < eff_kh || w_pad < eff_kw {
        return Err(Error::invalid(
            OP,
            format!(
                "effective kernel {eff_kh}x{eff_kw} exceeds padded input {h_pad}x{w_pad} \
                 (H={h_in}, W={w_in}, padding={})",
                spec.padding
            ),
        ));
    }
    let h_out = (h_pad - eff_kh) / spec.stride + 1;
    let w_out = (w_pad - eff_kw) / spec.stride + 1;
    Ok(ConvDims {
        h_in,
        w_in,
        c_out,
        kh,
        kw,
        h_out,
        w_out,
        cg_in,
        cg_out: c_out / spec.groups,
    })
}

/// Forward pass. Returns `[C_out, H_out, W_out]`.
pub fn forward(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    spec: &Conv2dSpec,
) -> Result<Tensor> {
    let d = check_dims(input, kernel, bias, spec)?;
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![0.0f64; d.c_out * d.h_out * d.w_out];

    for oc in 0..d.c_out {
        let g = oc / d.cg_out;
        let base = bias.map_or(0.0, |b| b.data()[oc]);
        for oh in 0..d.h_out {
            for ow in 0..d.w_out {
                let mut acc = base;
                let ih0 = (oh * spec.stride) as isize - spec.padding as isize;
                let iw0 = (ow * spec.stride) as isize - spec.padding as isize;
                for icg in 0..d.cg_in {
                    let ic = g * d.cg_in + icg;
                    let x_ch = ic * d.h_in * d.w_in;
                    let k_ch = ((oc * d.cg_in) + icg) * d.kh * d.kw;
                    for r in 0..d.kh {
                        let ih = ih0 + (r * spec.dilation) as isize;
                        if ih < 0 || ih >= d.h_in as isize {
                            continue;
                        }
                        let x_row = x_ch + ih as usize * d.w_in;
                        let k_row = k_ch + r * d.kw;
                        for s in 0..d.kw {
                            let iw = iw0 + (s * spec.dilation) as isize;
                            if iw < 0 || iw >= d.w_in as isize {
                                continue;
                            }
                            acc += x[x_row + iw as usize] * k[k_row + s];
                        }
                    }
                }
                out[(oc * d.h_out + oh) * d.w_out + ow] = acc;
            }
        }
    }
    Tensor::new(vec![d.c_out, d.h_out, d.w_out], out)
}

/// Gradients of the forward pass. Any of the three outputs can be skipped.
/// The loops mirror `forward` index-for-index, so each output gradient entry
/// distributes to exactly the inputs that produced it.
#[allow(clippy::too_many_arguments)]
pub fn backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &[f64],
    spec: &Conv2dSpec,
    need_dinput: bool,
    need_dkernel: bool,
    need_dbias: bool,
) -> Result<(Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>)> {
    let d = check_dims(input, kernel, None, spec)?;
    let x = input.data();
    let k = kernel.data();
    let mut dx = if need_dinput { Some(vec![0.0; x.len()]) } else { None };
    let mut dk = if need_dkernel { Some(vec![0.0; k.len()]) } else { None };
    let mut db = if need_dbias { Some(vec![0.0; d.c_out]) } else { None };

    for oc in 0..d.c_out {
        let g = oc / d.cg_out;
        for oh in 0..d.h_out {
            for ow in 0..d.w_out {
                let go = grad_out[(oc * d.h_out + oh) * d.w_out + ow];
                if let Some(db) = db.as_mut() {
                    db[oc] += go;
                }
                if go == 0.0 {
                    continue;
                }
                let ih0 = (oh * spec.stride) as isize - spec.padding as isize;
                let iw0 = (ow * spec.stride) as isize - spec.padding as isize;
                for icg in 0..d.cg_in {
                    let ic = g * d.cg_in + icg;
                    let x_ch = ic * d.h_in * d.w_in;
                    let k_ch = ((oc * d.cg_in) + icg) * d.kh * d.kw;
                    for r in 0..d.kh {
                        let ih = ih0 + (r * spec.dilation) as isize;
                        if ih < 0 || ih >= d.h_in as isize {
                            continue;
                        }
                        let x_row = x_ch + ih as usize * d.w_in;
                        let k_row = k_ch + r * d.kw;
                        for s in 0..d.kw {
                            let iw = iw0 + (s * spec.dilation) as isize;
                            if iw < 0 || iw >= d.w_in as isize {
                                continue;
                            }
                            if let Some(dx) = dx.as_mut() {
                                dx[x_row + iw as usize] += go * k[k_row + s];
                            }
                            if let Some(dk) = dk.as_mut() {
                                dk[k_row + s] += go * x[x_row + iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((dx, dk, db))
}
