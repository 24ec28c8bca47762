//! Dense `(channels, height, width)` arrays, label maps and validity masks.
//!
//! Storage is row-major with the channel index outermost, so the values of
//! one channel form a contiguous `height * width` slice and per-pixel
//! kernels (softmax over classes) walk the buffer with stride `height * width`.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Magic bytes at the start of a binary tensor dump.
pub const MVFT_MAGIC: &[u8; 4] = b"MVFT";

/// Class index type. Values `0..K` are classes, [`IGNORE`] marks unlabeled pixels.
pub type Label = u8;

/// Unlabeled / ignored pixel. Also the value 255 used in 8-bit label images.
pub const IGNORE: Label = Label::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    /// Number of elements, or a size error when a dimension is zero or the
    /// product overflows.
    pub fn checked_len(&self) -> Result<usize> {
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Size(format!("zero dimension in {self:?}")));
        }
        self.channels
            .checked_mul(self.height)
            .and_then(|n| n.checked_mul(self.width))
            .ok_or_else(|| Error::Size(format!("{self:?} overflows")))
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    /// Tensor of the given shape with every element set to `fill`.
    pub fn new(shape: Shape, fill: f64) -> Result<Self> {
        let len = shape.checked_len()?;
        Ok(Self {
            shape,
            data: vec![fill; len],
        })
    }

    /// Zero tensor. Panics on an invalid shape; use [`Tensor::new`] for
    /// shapes coming from untrusted input.
    pub fn zeros(shape: Shape) -> Self {
        Self::new(shape, 0.0).expect("valid tensor shape")
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        let len = shape.checked_len()?;
        if data.len() != len {
            return Err(Error::Size(format!(
                "{} values for shape {shape}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        debug_assert!(c < self.shape.channels && y < self.shape.height && x < self.shape.width);
        (c * self.shape.height + y) * self.shape.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f64) {
        let i = self.index(c, y, x);
        self.data[i] = value;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.shape.plane();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.shape.plane();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    /// `self += other`. Shapes must match.
    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Inner product of two tensors of equal shape.
    pub fn dot(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "dot shape mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    /// 2x2 average pooling. Height and width must be even.
    pub fn avg_pool2(&self) -> Result<Tensor> {
        let Shape {
            channels,
            height,
            width,
        } = self.shape;
        if height % 2 != 0 || width % 2 != 0 {
            return Err(Error::Shape(format!(
                "avg_pool2 needs even height and width, got {}",
                self.shape
            )));
        }
        let (oh, ow) = (height / 2, width / 2);
        let mut out = Tensor::zeros(Shape::new(channels, oh, ow));
        for c in 0..channels {
            for y in 0..oh {
                for x in 0..ow {
                    let s = self.get(c, 2 * y, 2 * x)
                        + self.get(c, 2 * y, 2 * x + 1)
                        + self.get(c, 2 * y + 1, 2 * x)
                        + self.get(c, 2 * y + 1, 2 * x + 1);
                    out.set(c, y, x, 0.25 * s);
                }
            }
        }
        Ok(out)
    }

    /// Writes the `MVFT` dump: magic, `C H W` as u32 LE, then the values as
    /// f64 LE in storage order.
    pub fn write_mvft<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MVFT_MAGIC)?;
        for d in [self.shape.channels, self.shape.height, self.shape.width] {
            let d = u32::try_from(d).map_err(|_| {
                std::io::Error::new(std::io::ErrorKind::InvalidInput, "dimension exceeds u32")
            })?;
            w.write_all(&d.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    /// Reads one `MVFT` dump from `r`. `origin` only labels error messages.
    pub fn read_mvft<R: Read>(mut r: R, origin: &Path) -> Result<Tensor> {
        let mut header = [0u8; 16];
        read_exact_at(&mut r, &mut header, 0, origin)?;
        if &header[..4] != MVFT_MAGIC {
            return Err(Error::format(origin, "bad magic, expected \"MVFT\""));
        }
        let dim = |i: usize| {
            u32::from_le_bytes(header[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize
        };
        let shape = Shape::new(dim(0), dim(1), dim(2));
        let len = shape
            .checked_len()
            .map_err(|e| Error::format(origin, e.to_string()))?;
        let mut bytes = vec![0u8; len * 8];
        read_exact_at(&mut r, &mut bytes, 16, origin)?;
        let data = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok(Tensor { shape, data })
    }

    pub fn save_mvft(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_mvft(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load_mvft(path: &Path) -> Result<Tensor> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Tensor::read_mvft(std::io::BufReader::new(file), path)
    }
}

/// `read_exact` that reports how far it got on truncation.
pub(crate) fn read_exact_at<R: Read>(
    r: &mut R,
    buf: &mut [u8],
    offset: usize,
    origin: &Path,
) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(Error::format(
                    origin,
                    format!(
                        "truncated at byte {}: expected {} more bytes",
                        offset + filled,
                        buf.len() - filled
                    ),
                ))
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(Error::io(origin, e)),
        }
    }
    Ok(())
}

/// Per-pixel class labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<Label>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, fill: Label) -> Self {
        Self {
            height,
            width,
            data: vec![fill; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<Label>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Size(format!(
                "{} labels for {height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[Label] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Label] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> Label {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, label: Label) {
        self.data[y * self.width + x] = label;
    }

    /// Checks that every non-ignored label is a valid class index.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self
            .data
            .iter()
            .position(|&l| l != IGNORE && l as usize >= num_classes)
        {
            Some(index) => Err(Error::InvalidLabel {
                label: self.data[index],
                index,
                num_classes,
            }),
            None => Ok(()),
        }
    }

    pub fn count_labeled(&self) -> usize {
        self.data.iter().filter(|&&l| l != IGNORE).count()
    }

    /// One-hot encoding with `num_classes` channels; ignored pixels are all zero.
    pub fn one_hot(&self, num_classes: usize) -> Tensor {
        let mut t = Tensor::zeros(Shape::new(num_classes, self.height, self.width));
        let plane = self.height * self.width;
        for (i, &l) in self.data.iter().enumerate() {
            if l != IGNORE && (l as usize) < num_classes {
                t.data_mut()[l as usize * plane + i] = 1.0;
            }
        }
        t
    }
}

/// Per-pixel validity flags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, valid: bool) -> Self {
        Self {
            height,
            width,
            data: vec![valid; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Size(format!(
                "{} mask entries for {height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [bool] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, valid: bool) {
        self.data[y * self.width + x] = valid;
    }

    pub fn count_valid(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn and(&self, other: &Mask) -> Mask {
        assert_eq!(
            (self.height, self.width),
            (other.height, other.width),
            "mask shape mismatch"
        );
        Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a && *b).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn new_fills() {
        let t = Tensor::new(Shape::new(1, 2, 2), 0.0).unwrap();
        assert_eq!(t.data(), &[0.0; 4]);
        let t = Tensor::new(Shape::new(3, 1, 1), 1.5).unwrap();
        assert_eq!(t.data(), &[1.5, 1.5, 1.5]);
        let t = Tensor::new(Shape::new(2, 240, 320), 0.0).unwrap();
        assert_eq!(t.data().len(), 153_600);
    }

    #[test]
    fn new_rejects_bad_sizes() {
        assert!(matches!(
            Tensor::new(Shape::new(0, 2, 2), 0.0),
            Err(Error::Size(_))
        ));
        assert!(matches!(
            Tensor::new(Shape::new(usize::MAX, 2, 2), 0.0),
            Err(Error::Size(_))
        ));
    }

    #[test]
    fn avg_pool_examples() {
        let t = Tensor::from_vec(Shape::new(1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.avg_pool2().unwrap().data(), &[2.5]);

        let ramp = Tensor::from_vec(Shape::new(1, 4, 4), (0..16).map(f64::from).collect()).unwrap();
        assert_eq!(ramp.avg_pool2().unwrap().data(), &[2.5, 4.5, 10.5, 12.5]);

        let c = Tensor::new(Shape::new(2, 4, 6), 0.7).unwrap();
        let p = c.avg_pool2().unwrap();
        assert_eq!(p.shape(), Shape::new(2, 2, 3));
        assert!(p.data().iter().all(|&v| v == 0.7));

        let odd = Tensor::zeros(Shape::new(1, 3, 4));
        assert!(matches!(odd.avg_pool2(), Err(Error::Shape(_))));
    }

    #[test]
    fn mvft_truncated_reports_offset() {
        let t = Tensor::new(Shape::new(1, 2, 2), 3.0).unwrap();
        let mut buf = Vec::new();
        t.write_mvft(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"MVFT");
        assert_eq!(buf.len(), 16 + 32);
        let err = Tensor::read_mvft(&buf[..30], Path::new("x.mvft")).unwrap_err();
        assert!(err.to_string().contains("truncated at byte 30"), "{err}");
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(Tensor::read_mvft(&bad[..], Path::new("x.mvft")).is_err());
    }

    #[test]
    fn label_validation() {
        let mut l = LabelMap::new(2, 2, 1);
        l.set(0, 1, IGNORE);
        assert!(l.validate(2).is_ok());
        l.set(1, 1, 5);
        assert!(matches!(
            l.validate(2),
            Err(Error::InvalidLabel { label: 5, index: 3, .. })
        ));
        assert_eq!(l.count_labeled(), 3);
    }

    proptest! {
        #[test]
        fn avg_pool_preserves_mean(c in 1usize..3, h in 1usize..5, w in 1usize..5,
                                    seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let shape = Shape::new(c, 2 * h, 2 * w);
            let data = (0..shape.checked_len().unwrap()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let t = Tensor::from_vec(shape, data).unwrap();
            let p = t.avg_pool2().unwrap();
            prop_assert!((t.mean() - p.mean()).abs() < 1e-12);
        }

        #[test]
        fn set_get_roundtrip(c in 0usize..3, y in 0usize..4, x in 0usize..5, v in -1e6f64..1e6) {
            let mut t = Tensor::zeros(Shape::new(3, 4, 5));
            t.set(c, y, x, v);
            prop_assert_eq!(t.get(c, y, x), v);
        }

        #[test]
        fn mvft_roundtrip(c in 1usize..3, h in 1usize..4, w in 1usize..4, v in proptest::collection::vec(-1e9f64..1e9, 36)) {
            let shape = Shape::new(c, h, w);
            let t = Tensor::from_vec(shape, v[..shape.checked_len().unwrap()].to_vec()).unwrap();
            let mut buf = Vec::new();
            t.write_mvft(&mut buf).unwrap();
            let back = Tensor::read_mvft(&buf[..], Path::new("mem")).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
