use pillars_core::graph_ir::{ConvSpec, TransposedConvSpec};

/// Runs a zero-padded direct convolution over a dense tensor. Returns the
/// output dims and the number of multiplications (bias adds count as one
/// multiply-add each).
pub fn direct_conv(cin: usize, h: usize, w: usize, c: &ConvSpec) -> (usize, usize, usize, u64) {
    let input: Vec<f64> = (0..cin * h * w).map(|i| (i % 7) as f64).collect();
    let ph = h + 2 * c.pad_h;
    let pw = w + 2 * c.pad_w;
    let mut oh = 0;
    while oh * c.stride_h + c.kernel_h <= ph {
        oh += 1;
    }
    let mut ow = 0;
    while ow * c.stride_w + c.kernel_w <= pw {
        ow += 1;
    }
    let cin_g = cin / c.groups;
    let cout_g = c.out_channels / c.groups;
    let mut out = vec![0.0; c.out_channels * oh * ow];
    let mut mults = 0u64;
    for o in 0..c.out_channels {
        let g = o / cout_g;
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = 0.0;
                for ci in g * cin_g..(g + 1) * cin_g {
                    for ky in 0..c.kernel_h {
                        for kx in 0..c.kernel_w {
                            let iy = (y * c.stride_h + ky) as isize - c.pad_h as isize;
                            let ix = (x * c.stride_w + kx) as isize - c.pad_w as isize;
                            let v = if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                input[(ci * h + iy as usize) * w + ix as usize]
                            } else {
                                0.0
                            };
                            acc += v * 0.5;
                            mults += 1;
                        }
                    }
                }
                if c.has_bias {
                    acc += 1.0;
                    mults += 1;
                }
                out[(o * oh + y) * ow + x] = acc;
            }
        }
    }
    assert_eq!(out.len(), c.out_channels * oh * ow);
    (c.out_channels, oh, ow, mults)
}

/// Scatter-style transposed convolution: every input pixel is multiplied
/// into a kernel-sized window of the output, then the border is cropped.
pub fn direct_transposed(cin: usize, h: usize, w: usize, t: &TransposedConvSpec) -> Option<(usize, usize, usize, u64)> {
    let full_h = (h - 1) * t.stride_h + t.kernel_h + t.output_pad_h;
    let full_w = (w - 1) * t.stride_w + t.kernel_w + t.output_pad_w;
    let oh = full_h.checked_sub(2 * t.pad_h).filter(|&v| v > 0)?;
    let ow = full_w.checked_sub(2 * t.pad_w).filter(|&v| v > 0)?;
    let cin_g = cin / t.groups;
    let cout_g = t.out_channels / t.groups;
    let mut full = vec![0.0f64; t.out_channels * full_h * full_w];
    let mut mults = 0u64;
    for ci in 0..cin {
        let g = ci / cin_g;
        for y in 0..h {
            for x in 0..w {
                for o in g * cout_g..(g + 1) * cout_g {
                    for ky in 0..t.kernel_h {
                        for kx in 0..t.kernel_w {
                            full[(o * full_h + y * t.stride_h + ky) * full_w + x * t.stride_w + kx] += 0.5;
                            mults += 1;
                        }
                    }
                }
            }
        }
    }
    if t.has_bias {
        mults += (t.out_channels * oh * ow) as u64;
    }
    Some((t.out_channels, oh, ow, mults))
}
