//! Raw 1D convolution kernels (im2col + GEMM) shared by the autodiff ops.

use crate::error::{Error, Result};
use crate::tensor::{matmul_into, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1dGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub len_in: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

impl Conv1dGeom {
    pub fn new(
        input: &[usize],
        weight: &[usize],
        stride: usize,
        pad_left: usize,
        pad_right: usize,
    ) -> Result<Self> {
        if input.len() != 2 || weight.len() != 3 {
            return Err(Error::shape(
                "conv1d",
                format!("expected input [C_in×L] and weight [C_out×C_in×K], got {input:?} and {weight:?}"),
            ));
        }
        if input[0] != weight[1] {
            return Err(Error::shape(
                "conv1d",
                format!("input axis 0 = {} but weight axis 1 = {}", input[0], weight[1]),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv1d", "stride must be >= 1"));
        }
        if input[1] + pad_left + pad_right < weight[2] {
            return Err(Error::shape(
                "conv1d",
                format!(
                    "padded length {} shorter than kernel {}",
                    input[1] + pad_left + pad_right,
                    weight[2]
                ),
            ));
        }
        Ok(Conv1dGeom {
            c_in: input[0],
            c_out: weight[0],
            len_in: input[1],
            kernel: weight[2],
            stride,
            pad_left,
            pad_right,
        })
    }

    pub fn len_out(&self) -> usize {
        (self.len_in + self.pad_left + self.pad_right - self.kernel) / self.stride + 1
    }

    fn im2col<T: Real>(&self, x: &[T]) -> Vec<T> {
        let lout = self.len_out();
        let mut cols = vec![T::zero(); self.c_in * self.kernel * lout];
        for ci in 0..self.c_in {
            let xrow = &x[ci * self.len_in..(ci + 1) * self.len_in];
            for t in 0..self.kernel {
                let row = &mut cols[(ci * self.kernel + t) * lout..(ci * self.kernel + t + 1) * lout];
                for (o, slot) in row.iter_mut().enumerate() {
                    let pos = (o * self.stride + t) as isize - self.pad_left as isize;
                    if pos >= 0 && (pos as usize) < self.len_in {
                        *slot = xrow[pos as usize];
                    }
                }
            }
        }
        cols
    }

    pub fn forward<T: Real>(&self, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
        let lout = self.len_out();
        let cols = self.im2col(x);
        let mut out = vec![T::zero(); self.c_out * lout];
        if let Some(b) = bias {
            for (co, row) in out.chunks_mut(lout).enumerate() {
                row.iter_mut().for_each(|v| *v = b[co]);
            }
        }
        matmul_into(
            self.c_out,
            self.c_in * self.kernel,
            lout,
            w,
            false,
            &cols,
            false,
            &mut out,
            true,
        );
        out
    }

    /// Accumulates adjoints into whichever of `gx`, `gw`, `gb` are present.
    pub fn backward<T: Real>(
        &self,
        x: &[T],
        w: &[T],
        g: &[T],
        gx: Option<&mut [T]>,
        gw: Option<&mut [T]>,
        gb: Option<&mut [T]>,
    ) {
        let lout = self.len_out();
        let ck = self.c_in * self.kernel;
        if let Some(gw) = gw {
            let cols = self.im2col(x);
            matmul_into(self.c_out, lout, ck, g, false, &cols, true, gw, true);
        }
        if let Some(gb) = gb {
            for (co, row) in g.chunks(lout).enumerate() {
                gb[co] += row.iter().copied().sum::<T>();
            }
        }
        if let Some(gx) = gx {
            let mut dcols = vec![T::zero(); ck * lout];
            matmul_into(ck, self.c_out, lout, w, true, g, false, &mut dcols, false);
            for ci in 0..self.c_in {
                for t in 0..self.kernel {
                    let row = &dcols[(ci * self.kernel + t) * lout..(ci * self.kernel + t + 1) * lout];
                    for (o, &d) in row.iter().enumerate() {
                        let pos = (o * self.stride + t) as isize - self.pad_left as isize;
                        if pos >= 0 && (pos as usize) < self.len_in {
                            gx[ci * self.len_in + pos as usize] += d;
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvTranspose1dGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub len_in: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvTranspose1dGeom {
    /// `weight` is laid out `[C_in×C_out×K]`.
    pub fn new(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 2 || weight.len() != 3 {
            return Err(Error::shape(
                "conv_transpose1d",
                format!("expected input [C_in×L] and weight [C_in×C_out×K], got {input:?} and {weight:?}"),
            ));
        }
        if input[0] != weight[0] {
            return Err(Error::shape(
                "conv_transpose1d",
                format!("input axis 0 = {} but weight axis 0 = {}", input[0], weight[0]),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv_transpose1d", "stride must be >= 1"));
        }
        if (input[1] - 1) * stride + weight[2] <= 2 * padding {
            return Err(Error::shape(
                "conv_transpose1d",
                "padding leaves an empty output",
            ));
        }
        Ok(ConvTranspose1dGeom {
            c_in: input[0],
            c_out: weight[1],
            len_in: input[1],
            kernel: weight[2],
            stride,
            padding,
        })
    }

    pub fn len_out(&self) -> usize {
        (self.len_in - 1) * self.stride + self.kernel - 2 * self.padding
    }

    fn target(&self, i: usize, t: usize) -> Option<usize> {
        let pos = (i * self.stride + t) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < self.len_out()).then_some(pos as usize)
    }

    pub fn forward<T: Real>(&self, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
        let lout = self.len_out();
        let ok = self.c_out * self.kernel;
        let mut cols = vec![T::zero(); ok * self.len_in];
        matmul_into(ok, self.c_in, self.len_in, w, true, x, false, &mut cols, false);
        let mut out = vec![T::zero(); self.c_out * lout];
        for co in 0..self.c_out {
            let orow = &mut out[co * lout..(co + 1) * lout];
            if let Some(b) = bias {
                orow.iter_mut().for_each(|v| *v = b[co]);
            }
            for t in 0..self.kernel {
                let crow = &cols[(co * self.kernel + t) * self.len_in..][..self.len_in];
                for (i, &c) in crow.iter().enumerate() {
                    if let Some(p) = self.target(i, t) {
                        orow[p] += c;
                    }
                }
            }
        }
        out
    }

    pub fn backward<T: Real>(
        &self,
        x: &[T],
        w: &[T],
        g: &[T],
        gx: Option<&mut [T]>,
        gw: Option<&mut [T]>,
        gb: Option<&mut [T]>,
    ) {
        let lout = self.len_out();
        let ok = self.c_out * self.kernel;
        if let Some(gb) = gb {
            for (co, row) in g.chunks(lout).enumerate() {
                gb[co] += row.iter().copied().sum::<T>();
            }
        }
        if gx.is_none() && gw.is_none() {
            return;
        }
        let mut dcols = vec![T::zero(); ok * self.len_in];
        for co in 0..self.c_out {
            let grow = &g[co * lout..(co + 1) * lout];
            for t in 0..self.kernel {
                let drow = &mut dcols[(co * self.kernel + t) * self.len_in..][..self.len_in];
                for (i, slot) in drow.iter_mut().enumerate() {
                    if let Some(p) = self.target(i, t) {
                        *slot = grow[p];
                    }
                }
            }
        }
        if let Some(gx) = gx {
            matmul_into(self.c_in, ok, self.len_in, w, false, &dcols, false, gx, true);
        }
        if let Some(gw) = gw {
            matmul_into(self.c_in, self.len_in, ok, x, false, &dcols, true, gw, true);
        }
    }
}
