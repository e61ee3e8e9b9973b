//! Dense row-major `f32` tensors and the `LMT1` file format.
//!
//! Every live [`Tensor`] is counted by a thread-local allocation counter so
//! the benchmark can report peak activation footprints without an external
//! allocator hook. See [`profile`].

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{shape_err, Error, Result};

pub mod profile {
    //! Thread-local counters for live float elements and multiply-adds.

    use std::cell::Cell;

    thread_local! {
        static LIVE: Cell<i64> = const { Cell::new(0) };
        static PEAK: Cell<i64> = const { Cell::new(0) };
        static FLOPS: Cell<u64> = const { Cell::new(0) };
    }

    pub(crate) fn on_alloc(n: usize) {
        LIVE.with(|live| {
            let v = live.get() + n as i64;
            live.set(v);
            PEAK.with(|p| {
                if v > p.get() {
                    p.set(v)
                }
            });
        });
    }

    pub(crate) fn on_free(n: usize) {
        LIVE.with(|live| live.set(live.get() - n as i64));
    }

    /// Float elements currently held by tensors created on this thread.
    pub fn live_floats() -> i64 {
        LIVE.with(|l| l.get())
    }

    /// Highest value of [`live_floats`] since the last [`reset_peak`].
    pub fn peak_floats() -> i64 {
        PEAK.with(|p| p.get())
    }

    pub fn reset_peak() {
        let live = live_floats();
        PEAK.with(|p| p.set(live));
    }

    /// Records `n` multiply-adds.
    pub fn add_flops(n: u64) {
        FLOPS.with(|f| f.set(f.get().wrapping_add(n)));
    }

    pub fn flops() -> u64 {
        FLOPS.with(|f| f.get())
    }

    pub fn reset_flops() {
        FLOPS.with(|f| f.set(0));
    }
}

/// Dense tensor of 32-bit floats in row-major order.
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {:?} needs {} values, got {}", shape, numel, data.len()),
            ));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(shape_err("tensor", format!("zero-sized dim in {:?}", shape)));
        }
        Ok(Self::from_parts(shape.to_vec(), data))
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        profile::on_alloc(data.len());
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f32) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let n: usize = shape.iter().product();
        Self::from_parts(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(mut self) -> Vec<f32> {
        let data = std::mem::take(&mut self.data);
        profile::on_free(data.len());
        data
    }

    /// Same data under a new shape.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        Ok(Tensor::from_parts(shape.to_vec(), self.data.clone()))
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> f32 {
        self.data[0]
    }

    /// Fails with a numerical error if any element is NaN or infinite.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "{what}: non-finite value {} at flat index {i}",
                self.data[i]
            )));
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f32]) {
        assert_eq!(g.len(), self.numel(), "gradient size mismatch");
        let buf = self.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        for (b, v) in buf.iter_mut().zip(g) {
            *b += v;
        }
    }

    // LMT1: b"LMT1", u8 rank, rank x u32 LE dims, f32 LE payload.

    pub fn write_lmt1<W: Write>(&self, w: &mut W) -> Result<()> {
        if self.rank() > u8::MAX as usize {
            return Err(Error::Format(format!("rank {} too large", self.rank())));
        }
        w.write_all(b"LMT1")?;
        w.write_all(&[self.rank() as u8])?;
        for &d in &self.shape {
            let d = u32::try_from(d)
                .map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.numel() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_lmt1<R: Read>(r: &mut R) -> Result<Tensor> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"LMT1" {
            return Err(Error::Format(format!("bad tensor magic {:?}", magic)));
        }
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            let mut d = [0u8; 4];
            r.read_exact(&mut d)?;
            shape.push(u32::from_le_bytes(d) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut bytes = vec![0u8; numel * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::new(&shape, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_lmt1(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", path.display()),
            ))
        })?;
        Tensor::read_lmt1(&mut std::io::BufReader::new(f))
    }
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        profile::on_alloc(self.data.len());
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            requires_grad: self.requires_grad,
            grad: self.grad.clone(),
        }
    }
}

impl Drop for Tensor {
    fn drop(&mut self) {
        profile::on_free(self.data.len());
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let head: Vec<f32> = self.data.iter().take(8).copied().collect();
        write!(f, "Tensor{:?} {:?}", self.shape, head)?;
        if self.numel() > 8 {
            write!(f, "..")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_payload() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[2, 0], vec![]).is_err());
    }

    #[test]
    fn lmt1_layout_is_bit_exact() {
        let t = Tensor::new(&[2, 1], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        t.write_lmt1(&mut buf).unwrap();
        let mut expected = b"LMT1".to_vec();
        expected.push(2);
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(buf, expected);
        let back = Tensor::read_lmt1(&mut buf.as_slice()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn lmt1_rejects_bad_magic_and_truncation() {
        let mut buf = b"LMT2\x01\x01\x00\x00\x00".to_vec();
        buf.extend_from_slice(&0f32.to_le_bytes());
        assert!(Tensor::read_lmt1(&mut buf.as_slice()).is_err());
        let t = Tensor::zeros(&[4]);
        let mut ok = Vec::new();
        t.write_lmt1(&mut ok).unwrap();
        ok.truncate(ok.len() - 1);
        assert!(Tensor::read_lmt1(&mut ok.as_slice()).is_err());
    }

    #[test]
    fn finiteness_check() {
        let t = Tensor::new(&[3], vec![0.0, f32::NAN, 1.0]).unwrap();
        assert!(matches!(t.check_finite("t"), Err(Error::Numerical(_))));
        assert!(Tensor::zeros(&[3]).check_finite("z").is_ok());
    }

    #[test]
    fn live_counter_tracks_drop() {
        let before = profile::live_floats();
        {
            let a = Tensor::zeros(&[10, 10]);
            let _b = a.clone();
            assert_eq!(profile::live_floats() - before, 200);
        }
        assert_eq!(profile::live_floats(), before);
    }
}
