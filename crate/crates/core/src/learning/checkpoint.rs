//! Checkpoint file: a text header naming the architecture and the blobs,
//! a line `end`, then the blobs as concatenated `MVFT` tensors.
//!
//! ```text
//! MVCKPT 1
//! classes 4
//! widths 8 16
//! kernel 3
//! blob enc_rgb.0.weight 24 3 3
//! blob enc_rgb.0.bias 8 1 1
//! ...
//! end
//! ```
//!
//! Weights are stored as `(out * in, k, k)`, biases as `(out, 1, 1)`.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::net::{ToyNetConfig, ToyNetParams};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

const MAGIC: &str = "MVCKPT 1";

fn blobs(params: &ToyNetParams) -> Vec<(String, Shape)> {
    let mut out = Vec::new();
    for (name, l) in params.layer_names().into_iter().zip(&params.layers) {
        out.push((
            format!("{name}.weight"),
            Shape::new(l.out_channels * l.in_channels, l.kernel, l.kernel),
        ));
        out.push((format!("{name}.bias"), Shape::new(l.out_channels, 1, 1)));
    }
    out
}

pub fn write_checkpoint<W: Write>(params: &ToyNetParams, mut w: W) -> std::io::Result<()> {
    let c = &params.config;
    let mut header = format!("{MAGIC}\nclasses {}\nwidths", c.num_classes);
    for width in &c.widths {
        write!(header, " {width}").unwrap();
    }
    writeln!(header, "\nkernel {}", c.kernel).unwrap();
    let layout = blobs(params);
    for (name, s) in &layout {
        writeln!(header, "blob {name} {} {} {}", s.channels, s.height, s.width).unwrap();
    }
    header.push_str("end\n");
    w.write_all(header.as_bytes())?;
    for (layer, pair) in params.layers.iter().zip(layout.chunks(2)) {
        Tensor::from_vec(pair[0].1, layer.weight.clone())
            .expect("weight blob shape")
            .write_mvft(&mut w)?;
        Tensor::from_vec(pair[1].1, layer.bias.clone())
            .expect("bias blob shape")
            .write_mvft(&mut w)?;
    }
    w.flush()
}

pub fn save_checkpoint(path: &Path, params: &ToyNetParams) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(params, std::io::BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint<R: Read>(r: R, origin: &Path) -> Result<ToyNetParams> {
    let mut r = BufReader::new(r);
    let mut lines = Vec::new();
    let mut line_no = 0;
    loop {
        let mut line = String::new();
        let n = r.read_line(&mut line).map_err(|e| Error::io(origin, e))?;
        line_no += 1;
        if n == 0 {
            return Err(Error::format(origin, "header ends before `end`"));
        }
        let line = line.trim_end().to_string();
        if line == "end" {
            break;
        }
        lines.push((line_no, line));
    }
    let err = |line: usize, msg: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        msg,
    };
    let mut it = lines.iter();
    match it.next() {
        Some((_, l)) if l == MAGIC => {}
        _ => return Err(err(1, format!("expected {MAGIC:?}"))),
    }
    let mut field = |key: &str| -> Result<(usize, Vec<usize>)> {
        let (n, l) = it.next().ok_or_else(|| Error::format(origin, format!("missing `{key}`")))?;
        let mut toks = l.split_whitespace();
        if toks.next() != Some(key) {
            return Err(err(*n, format!("expected `{key}`")));
        }
        let values = toks
            .map(|t| t.parse::<usize>().map_err(|_| err(*n, format!("bad number {t:?}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok((*n, values))
    };
    let (n, classes) = field("classes")?;
    let (_, widths) = field("widths")?;
    let (_, kernel) = field("kernel")?;
    let (&[num_classes], &[kernel]) = (classes.as_slice(), kernel.as_slice()) else {
        return Err(err(n, "classes and kernel take one value".into()));
    };
    let config = ToyNetConfig {
        num_classes,
        widths,
        kernel,
    };
    let mut params = ToyNetParams::zeros(config)?;
    let layout = blobs(&params);
    let rest: Vec<&(usize, String)> = lines.iter().skip(4).collect();
    if rest.len() != layout.len() {
        return Err(Error::format(
            origin,
            format!("{} blobs listed, architecture needs {}", rest.len(), layout.len()),
        ));
    }
    for ((n, l), (name, shape)) in rest.iter().map(|p| (&p.0, &p.1)).zip(&layout) {
        let expected = format!("blob {name} {} {} {}", shape.channels, shape.height, shape.width);
        if *l != expected {
            return Err(err(*n, format!("expected {expected:?}, found {l:?}")));
        }
    }
    for (i, (name, shape)) in layout.iter().enumerate() {
        let t = Tensor::read_mvft(&mut r, origin)?;
        if t.shape() != *shape {
            return Err(Error::format(origin, format!("blob {name} has shape {}, expected {shape}", t.shape())));
        }
        if !t.is_finite() {
            return Err(Error::format(origin, format!("blob {name} has non-finite values")));
        }
        let layer = &mut params.layers[i / 2];
        if i % 2 == 0 {
            layer.weight = t.into_vec();
        } else {
            layer.bias = t.into_vec();
        }
    }
    Ok(params)
}

pub fn load_checkpoint(path: &Path) -> Result<ToyNetParams> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(file, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_exact() {
        let p = ToyNetParams::init(ToyNetConfig::default(), 3).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        let back = read_checkpoint(buf.as_slice(), Path::new("ck")).unwrap();
        assert_eq!(back, p);
        let text = String::from_utf8_lossy(&buf[..200]).into_owned();
        assert!(text.starts_with("MVCKPT 1\nclasses 4\nwidths 8 16\nkernel 3\nblob enc_rgb.0.weight 24 3 3\n"));
    }

    #[test]
    fn rejects_damage() {
        let p = ToyNetParams::init(ToyNetConfig::default(), 3).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        assert!(read_checkpoint(&buf[..buf.len() - 5], Path::new("ck")).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(bad.as_slice(), Path::new("ck")).is_err());
        let text = String::from_utf8_lossy(&buf).replace("widths 8 16", "widths 8 12");
        assert!(read_checkpoint(text.as_bytes(), Path::new("ck")).is_err());
    }
}
