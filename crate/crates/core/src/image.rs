//! Raster images and the binary PPM/PGM codecs.

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Row-major image with interleaved channels and intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage<T> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Real> RasterImage<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("image must be nonempty"));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!("channels must be 1 or 3, got {channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::invalid(format!(
                "image data has {} values, expected {}",
                data.len(),
                height * width * channels
            )));
        }
        if data.iter().any(|v| !(*v >= T::zero() && *v <= T::one())) {
            return Err(Error::invalid("image intensities must lie in [0, 1]"));
        }
        Ok(RasterImage { height, width, channels, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        RasterImage {
            height,
            width,
            channels,
            data: vec![T::zero(); height * width * channels],
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> T {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: T) {
        self.data[(row * self.width + col) * self.channels + ch] = v;
    }

    /// Quantizes to 8-bit samples.
    pub fn to_bytes(&self) -> Vec<u8> {
        let scale = T::lit(255.0);
        self.data
            .iter()
            .map(|v| {
                let q = (v.max(T::zero()).min(T::one()) * scale).round();
                q.to_u8().unwrap_or(0)
            })
            .collect()
    }

    pub fn from_bytes(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        let scale = T::lit(255.0);
        let data = bytes.iter().map(|&b| T::from_u8(b).unwrap() / scale).collect();
        RasterImage::new(height, width, channels, data)
    }
}

/// Encodes a 3-channel image as binary PPM (`P6`, maxval 255).
pub fn encode_ppm<T: Real>(img: &RasterImage<T>) -> Result<Vec<u8>> {
    if img.channels != 3 {
        return Err(Error::invalid("PPM needs a 3-channel image"));
    }
    Ok(encode_pnm(b"P6", img))
}

/// Encodes a 1-channel image as binary PGM (`P5`, maxval 255).
pub fn encode_pgm<T: Real>(img: &RasterImage<T>) -> Result<Vec<u8>> {
    if img.channels != 1 {
        return Err(Error::invalid("PGM needs a 1-channel image"));
    }
    Ok(encode_pnm(b"P5", img))
}

/// Encodes a boolean mask as PGM with 255 for `true`.
pub fn encode_mask_pgm(height: usize, width: usize, mask: &[bool]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(mask.iter().map(|&m| if m { 255u8 } else { 0 }));
    out
}

fn encode_pnm<T: Real>(magic: &[u8; 2], img: &RasterImage<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + img.data.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(format!("\n{} {}\n255\n", img.width, img.height).as_bytes());
    out.extend(img.to_bytes());
    out
}

pub fn decode_ppm<T: Real>(bytes: &[u8]) -> Result<RasterImage<T>> {
    let (h, w, pixels) = decode_pnm(bytes, b"P6", 3, "PPM")?;
    RasterImage::from_bytes(h, w, 3, pixels)
}

pub fn decode_pgm<T: Real>(bytes: &[u8]) -> Result<RasterImage<T>> {
    let (h, w, pixels) = decode_pnm(bytes, b"P5", 1, "PGM")?;
    RasterImage::from_bytes(h, w, 1, pixels)
}

/// Parses a binary netpbm header and returns `(height, width, pixels)`.
fn decode_pnm<'a>(
    bytes: &'a [u8],
    magic: &[u8; 2],
    channels: usize,
    context: &'static str,
) -> Result<(usize, usize, &'a [u8])> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::parse(context, "bad magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::parse(context, "truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::parse(context, "expected a decimal header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::parse(context, "header field out of range"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::parse(context, "missing whitespace after maxval"));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::parse(context, format!("maxval must be 255, got {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::parse(context, "zero-sized image"));
    }
    let expected = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| Error::parse(context, "image size overflows"))?;
    let pixels = &bytes[pos..];
    if pixels.len() != expected {
        return Err(Error::parse(
            context,
            format!("pixel payload has {} bytes, expected {expected}", pixels.len()),
        ));
    }
    Ok((height, width, pixels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_is_bit_exact() {
        let bytes: Vec<u8> = (0..=255u8).cycle().take(4 * 5 * 3).collect();
        let mut file = b"P6\n5 4\n255\n".to_vec();
        file.extend(&bytes);
        let img: RasterImage<f64> = decode_ppm(&file).unwrap();
        assert_eq!(encode_ppm(&img).unwrap(), file);
    }

    #[test]
    fn pgm_with_comment() {
        let file = b"P5\n# hello\n2 1\n255\n\x00\xff".to_vec();
        let img: RasterImage<f32> = decode_pgm(&file).unwrap();
        assert_eq!(img.data, vec![0.0, 1.0]);
    }

    #[test]
    fn rejects_bad_headers() {
        assert!(decode_ppm::<f64>(b"P5\n1 1\n255\n\0").is_err());
        assert!(decode_ppm::<f64>(b"P6\n1 1\n65535\n\0\0\0\0\0\0").is_err());
        assert!(decode_ppm::<f64>(b"P6\n2 1\n255\n\0\0\0").is_err());
        assert!(decode_ppm::<f64>(b"P6\n1 1\n255\n\0\0\0\0").is_err());
        assert!(decode_ppm::<f64>(b"P6\n1").is_err());
    }

    #[test]
    fn validates_range() {
        assert!(RasterImage::new(1, 1, 1, vec![1.5f64]).is_err());
        assert!(RasterImage::new(1, 1, 2, vec![0.5f64, 0.5]).is_err());
    }
}
