//! Netpbm (P5/P6), grayscale PFM, `bbox.txt` and OBJ/XYZ text formats.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, Vec3};

/// Largest pixel count the decoders accept.
const MAX_PIXELS: usize = 1 << 26;

/// Reads whitespace-separated header tokens (with `#` comments) and
/// returns them with the offset of the byte after the single whitespace
/// that ends the last one.
fn header_tokens<'a>(bytes: &'a [u8], count: usize, file: &str) -> Result<(Vec<&'a str>, usize)> {
    let mut tokens = Vec::with_capacity(count);
    let mut pos = 0;
    while tokens.len() < count {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::parse(file, 1, "truncated header"));
        }
        let tok = std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::parse(file, 1, "header is not ASCII"))?;
        tokens.push(tok);
    }
    if pos >= bytes.len() {
        return Err(Error::parse(file, 1, "missing pixel data"));
    }
    Ok((tokens, pos + 1))
}

fn dims(w: &str, h: &str, file: &str) -> Result<(usize, usize)> {
    let parse = |s: &str| {
        s.parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::parse(file, 1, format!("bad image dimension `{s}`")))
    };
    let (w, h) = (parse(w)?, parse(h)?);
    if w.saturating_mul(h) > MAX_PIXELS {
        return Err(Error::parse(file, 1, format!("image {w}x{h} too large")));
    }
    Ok((w, h))
}

fn netpbm(bytes: &[u8], magic: &str, channels: usize, file: &str) -> Result<(usize, usize, Vec<u8>)> {
    let (t, start) = header_tokens(bytes, 4, file)?;
    if t[0] != magic {
        return Err(Error::parse(
            file,
            1,
            format!("expected `{magic}` magic, got `{}`", t[0]),
        ));
    }
    let (w, h) = dims(t[1], t[2], file)?;
    if t[3] != "255" {
        return Err(Error::parse(file, 1, format!("unsupported maxval `{}`", t[3])));
    }
    let need = w * h * channels;
    let data = &bytes[start..];
    if data.len() != need {
        return Err(Error::parse(
            file,
            1,
            format!("expected {need} bytes of pixel data, found {}", data.len()),
        ));
    }
    Ok((w, h, data.to_vec()))
}

/// Binary P6 to `(width, height, rgb bytes)`.
pub fn parse_ppm(bytes: &[u8], file: &str) -> Result<(usize, usize, Vec<u8>)> {
    netpbm(bytes, "P6", 3, file)
}

/// Binary P5 to `(width, height, bytes)`.
pub fn parse_pgm(bytes: &[u8], file: &str) -> Result<(usize, usize, Vec<u8>)> {
    netpbm(bytes, "P5", 1, file)
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

pub fn encode_pgm(width: usize, height: usize, gray: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

/// `[0, 1]` to 8 bits with rounding; out-of-range values clamp.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Grayscale little-endian PFM (scale `-1.0`); rows stored bottom to top.
pub fn encode_pfm(width: usize, height: usize, values: &[f32]) -> Vec<u8> {
    let mut out = format!("Pf\n{width} {height}\n-1.0\n").into_bytes();
    for y in (0..height).rev() {
        for v in &values[y * width..(y + 1) * width] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Grayscale PFM to `(width, height, values)` in top-to-bottom row order.
pub fn parse_pfm(bytes: &[u8], file: &str) -> Result<(usize, usize, Vec<f32>)> {
    let (t, start) = header_tokens(bytes, 4, file)?;
    if t[0] != "Pf" {
        return Err(Error::parse(file, 1, format!("expected `Pf` magic, got `{}`", t[0])));
    }
    let (w, h) = dims(t[1], t[2], file)?;
    let scale: f64 = t[3]
        .parse()
        .ok()
        .filter(|s: &f64| s.is_finite() && *s != 0.0)
        .ok_or_else(|| Error::parse(file, 1, format!("bad scale `{}`", t[3])))?;
    let data = &bytes[start..];
    if data.len() != w * h * 4 {
        return Err(Error::parse(
            file,
            1,
            format!("expected {} bytes of float data, found {}", w * h * 4, data.len()),
        ));
    }
    let read = |c: &[u8]| {
        let b: [u8; 4] = c.try_into().expect("4 bytes");
        if scale < 0.0 {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        }
    };
    let mut values = vec![0.0f32; w * h];
    for (row, chunk) in data.chunks_exact(w * 4).enumerate() {
        let y = h - 1 - row;
        for (x, c) in chunk.chunks_exact(4).enumerate() {
            values[y * w + x] = read(c);
        }
    }
    Ok((w, h, values))
}

pub fn format_bbox(b: &BoundingBox) -> String {
    format!(
        "{} {} {}\n{} {} {}\n",
        b.min[0], b.min[1], b.min[2], b.max[0], b.max[1], b.max[2]
    )
}

/// Two lines of three floats: min, then max.
pub fn parse_bbox(text: &str, file: &str) -> Result<BoundingBox> {
    let lines: Vec<(usize, &str)> = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).collect();
    if lines.len() != 2 {
        return Err(Error::parse(
            file,
            lines.get(2).map_or(1, |l| l.0 + 1),
            "expected two lines",
        ));
    }
    let mut corners = [[0.0; 3]; 2];
    for ((n, line), dst) in lines.iter().zip(&mut corners) {
        let vals: Vec<&str> = line.split_whitespace().collect();
        if vals.len() != 3 {
            return Err(Error::parse(file, n + 1, "expected 3 numbers"));
        }
        for (d, v) in dst.iter_mut().zip(vals) {
            *d = v
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| Error::parse(file, n + 1, format!("bad number `{v}`")))?;
        }
    }
    BoundingBox::new(corners[0], corners[1]).map_err(|e| Error::parse(file, 2, e.to_string()))
}

/// ASCII OBJ with `v` and 1-based `f` records.
pub fn format_obj(vertices: &[Vec3], triangles: &[[usize; 3]]) -> String {
    let mut s = String::new();
    for v in vertices {
        let _ = writeln!(s, "v {} {} {}", v[0], v[1], v[2]);
    }
    for t in triangles {
        let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
    }
    s
}

/// Reads `v`/`f` records (triangles only; `f a/b/c` forms use the vertex
/// index); other records are ignored.
pub fn parse_obj(text: &str, file: &str) -> Result<(Vec<Vec3>, Vec<[usize; 3]>)> {
    let mut verts = Vec::new();
    let mut faces = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let mut p = [0.0; 3];
                for d in &mut p {
                    let tok = it
                        .next()
                        .ok_or_else(|| Error::parse(file, n + 1, "vertex needs 3 coordinates"))?;
                    *d = tok
                        .parse::<f64>()
                        .ok()
                        .filter(|x| x.is_finite())
                        .ok_or_else(|| Error::parse(file, n + 1, format!("bad coordinate `{tok}`")))?;
                }
                verts.push(p);
            }
            Some("f") => {
                let idx: Vec<&str> = it.collect();
                if idx.len() != 3 {
                    return Err(Error::parse(file, n + 1, "only triangles are supported"));
                }
                let mut f = [0usize; 3];
                for (d, tok) in f.iter_mut().zip(idx) {
                    let head = tok.split('/').next().unwrap_or("");
                    let i: usize = head
                        .parse()
                        .ok()
                        .filter(|&i| i >= 1)
                        .ok_or_else(|| Error::parse(file, n + 1, format!("bad face index `{tok}`")))?;
                    *d = i - 1;
                }
                faces.push(f);
            }
            _ => {}
        }
    }
    if let Some(bad) = faces.iter().flatten().find(|&&i| i >= verts.len()) {
        return Err(Error::parse(file, 1, format!("face index {} out of range", bad + 1)));
    }
    Ok((verts, faces))
}

/// One `x y z` line per point.
pub fn format_xyz(points: &[Vec3]) -> String {
    let mut s = String::new();
    for p in points {
        let _ = writeln!(s, "{} {} {}", p[0], p[1], p[2]);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn netpbm_round_trip_and_errors() {
        let rgb: Vec<u8> = (0..2 * 3 * 3).map(|i| i as u8 * 7).collect();
        let bytes = encode_ppm(2, 3, &rgb);
        assert_eq!(parse_ppm(&bytes, "a.ppm").unwrap(), (2, 3, rgb));
        assert!(parse_ppm(&bytes[..bytes.len() - 1], "a.ppm").is_err());
        assert!(parse_pgm(&bytes, "a.pgm").is_err());
        let with_comment = b"P5\n# made by hand\n2 1\n255\n\x00\xff";
        assert_eq!(parse_pgm(with_comment, "m.pgm").unwrap(), (2, 1, vec![0, 255]));
    }

    #[test]
    fn pfm_orientation_and_round_trip() {
        let v = vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0];
        let bytes = encode_pfm(3, 2, &v);
        assert!(bytes.starts_with(b"Pf\n3 2\n-1.0\n"));
        // bottom row first on disk
        assert_eq!(&bytes[12..16], &4.0f32.to_le_bytes());
        assert_eq!(parse_pfm(&bytes, "d.pfm").unwrap(), (3, 2, v));
        assert!(parse_pfm(b"PF\n1 1\n-1.0\n\0\0\0\0", "d.pfm").is_err());
    }

    #[test]
    fn bbox_round_trip() {
        let b = BoundingBox::new([-1.25, -0.1, 0.3], [1.0, 2.0, 1.0 / 3.0]).unwrap();
        assert_eq!(parse_bbox(&format_bbox(&b), "bbox.txt").unwrap(), b);
        let err = parse_bbox("0 0 0\n1 1\n", "bbox.txt").unwrap_err();
        assert!(err.to_string().contains("bbox.txt"));
        assert!(parse_bbox("1 1 1\n0 0 0\n", "bbox.txt").is_err());
    }

    #[test]
    fn obj_round_trip() {
        let v = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.5], [0.0, 1.0, -0.25]];
        let f = vec![[0, 1, 2]];
        assert_eq!(parse_obj(&format_obj(&v, &f), "m.obj").unwrap(), (v, f));
        assert!(parse_obj("v 0 0 0\nf 1 2 3\n", "m.obj").is_err());
    }

    proptest! {
        #[test]
        fn decoders_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
            let _ = parse_ppm(&bytes, "x");
            let _ = parse_pgm(&bytes, "x");
            let _ = parse_pfm(&bytes, "x");
            let text = String::from_utf8_lossy(&bytes);
            let _ = parse_bbox(&text, "x");
            let _ = parse_obj(&text, "x");
        }

        #[test]
        fn pfm_round_trips(w in 1usize..5, h in 1usize..5, seed in any::<u32>()) {
            let v: Vec<f32> = (0..w * h).map(|i| (i as f32 + 0.25) * (seed % 97) as f32).collect();
            prop_assert_eq!(parse_pfm(&encode_pfm(w, h, &v), "x").unwrap(), (w, h, v));
        }
    }
}
