use super::{Result, TrainError};
use crate::flow::TokenSequence;

/// Image stored as `height × width × channels`, channel-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 || data.len() != height * width * channels {
            return Err(TrainError::Patch(format!(
                "{} values for a {height}×{width}×{channels} image",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let at = (row * self.width + col) * self.channels;
        &self.data[at..at + self.channels]
    }
}

fn check_patch(height: usize, width: usize, p: usize) -> Result<()> {
    if p == 0 || !height.is_multiple_of(p) || !width.is_multiple_of(p) {
        return Err(TrainError::Patch(format!(
            "patch size {p} does not divide a {height}×{width} image"
        )));
    }
    Ok(())
}

/// Splits an image into `(H/p)(W/p)` tokens of dimension `p²c`. Patches are
/// in raster order; within a patch pixels are row-major with channels fastest.
pub fn patchify(img: &Image, p: usize) -> Result<TokenSequence> {
    check_patch(img.height, img.width, p)?;
    let (ph, pw) = (img.height / p, img.width / p);
    let mut data = Vec::with_capacity(img.data.len());
    for pr in 0..ph {
        for pc in 0..pw {
            for r in 0..p {
                for c in 0..p {
                    data.extend_from_slice(img.pixel(pr * p + r, pc * p + c));
                }
            }
        }
    }
    Ok(TokenSequence::new(ph * pw, p * p * img.channels, data)?)
}

/// Inverse of [`patchify`].
pub fn unpatchify(seq: &TokenSequence, height: usize, width: usize, channels: usize, p: usize) -> Result<Image> {
    check_patch(height, width, p)?;
    let (ph, pw) = (height / p, width / p);
    if seq.tokens() != ph * pw || seq.dim() != p * p * channels {
        return Err(TrainError::Patch(format!(
            "{} tokens of dimension {} do not tile a {height}×{width}×{channels} image with patch {p}",
            seq.tokens(),
            seq.dim()
        )));
    }
    let mut data = vec![0.0; height * width * channels];
    for pr in 0..ph {
        for pc in 0..pw {
            let token = seq.token(pr * pw + pc);
            for r in 0..p {
                for c in 0..p {
                    let src = (r * p + c) * channels;
                    let dst = ((pr * p + r) * width + pc * p + c) * channels;
                    data[dst..dst + channels].copy_from_slice(&token[src..src + channels]);
                }
            }
        }
    }
    Image::new(height, width, channels, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, c: usize) -> Image {
        let data = (0..h * w * c).map(|i| i as f64 / 10.0).collect();
        Image::new(h, w, c, data).unwrap()
    }

    #[test]
    fn shape_of_four_by_four() {
        let s = patchify(&ramp(4, 4, 1), 2).unwrap();
        assert_eq!((s.tokens(), s.dim()), (4, 4));
        // First patch covers pixels (0,0) (0,1) (1,0) (1,1).
        assert_eq!(s.token(0), &[0.0, 0.1, 0.4, 0.5]);
        assert_eq!(s.token(1), &[0.2, 0.3, 0.6, 0.7]);
    }

    #[test]
    fn round_trip_is_bitwise() {
        for (h, w, c, p) in [(4, 4, 1, 2), (6, 4, 3, 2), (8, 8, 3, 4), (3, 5, 2, 1)] {
            let img = ramp(h, w, c);
            let back = unpatchify(&patchify(&img, p).unwrap(), h, w, c, p).unwrap();
            assert_eq!(back, img);
        }
    }

    #[test]
    fn constant_image_gives_identical_tokens() {
        let s = patchify(&Image::filled(6, 6, 3, 0.25), 3).unwrap();
        for n in 1..s.tokens() {
            assert_eq!(s.token(n), s.token(0));
        }
    }

    #[test]
    fn rejects_non_dividing_patch() {
        assert!(patchify(&ramp(5, 4, 1), 2).is_err());
        assert!(patchify(&ramp(4, 4, 1), 0).is_err());
        let s = patchify(&ramp(4, 4, 1), 2).unwrap();
        assert!(unpatchify(&s, 4, 4, 3, 2).is_err());
    }
}
