use std::fmt;
use std::str::FromStr;

use super::resize::{quantize, sample_bilinear};
use super::ImageOpsError;
use crate::raster::{Image, Rgb};
use crate::rng::SplitMix64;

/// 2×3 matrix mapping an output pixel coordinate to the source coordinate
/// it samples from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform {
    pub m: [[f64; 3]; 2],
}

impl AffineTransform {
    pub const IDENTITY: Self = Self {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
    };

    pub fn new(m: [[f64; 3]; 2]) -> Self {
        Self { m }
    }

    pub fn is_finite(&self) -> bool {
        self.m.iter().flatten().all(|v| v.is_finite())
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let [r0, r1] = self.m;
        (
            r0[0] * x + r0[1] * y + r0[2],
            r1[0] * x + r1[1] * y + r1[2],
        )
    }

    /// Largest absolute entry-wise difference.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.m
            .iter()
            .flatten()
            .zip(other.m.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl Default for AffineTransform {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// The lookup that first applies `b`, then `a` (the homogeneous product `a·b`).
pub fn compose(a: &AffineTransform, b: &AffineTransform) -> AffineTransform {
    let (a, b) = (a.m, b.m);
    let mut m = [[0.0; 3]; 2];
    for r in 0..2 {
        m[r][0] = a[r][0] * b[0][0] + a[r][1] * b[1][0];
        m[r][1] = a[r][0] * b[0][1] + a[r][1] * b[1][1];
        m[r][2] = a[r][0] * b[0][2] + a[r][1] * b[1][2] + a[r][2];
    }
    AffineTransform { m }
}

/// A concrete label-preserving transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Transform {
    HFlip,
    VFlip,
    /// s > 1 magnifies.
    Scale(f64),
    /// Degrees.
    Rotate(f64),
}

/// (cos θ, sin θ), exact at multiples of 90°.
fn cos_sin_degrees(theta: f64) -> (f64, f64) {
    let r = theta.rem_euclid(360.0);
    match r {
        0.0 => (1.0, 0.0),
        90.0 => (0.0, 1.0),
        180.0 => (-1.0, 0.0),
        270.0 => (0.0, -1.0),
        _ => {
            let rad = r.to_radians();
            (rad.cos(), rad.sin())
        }
    }
}

/// Output→source matrix for a transform about the center of a `w`×`h` image.
pub fn make_preset(t: Transform, w: usize, h: usize) -> Result<AffineTransform, ImageOpsError> {
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let m = match t {
        Transform::HFlip => [[-1.0, 0.0, w as f64 - 1.0], [0.0, 1.0, 0.0]],
        Transform::VFlip => [[1.0, 0.0, 0.0], [0.0, -1.0, h as f64 - 1.0]],
        Transform::Scale(s) => {
            if !(s.is_finite() && s > 0.0) {
                return Err(ImageOpsError::Preset(format!("scale factor must be positive, got {s}")));
            }
            let inv = 1.0 / s;
            [[inv, 0.0, cx - cx * inv], [0.0, inv, cy - cy * inv]]
        }
        Transform::Rotate(theta) => {
            if !theta.is_finite() {
                return Err(ImageOpsError::Preset(format!("rotation angle must be finite, got {theta}")));
            }
            // source = R(-θ) (out - c) + c
            let (cos, sin) = cos_sin_degrees(theta);
            [
                [cos, sin, cx - cos * cx - sin * cy],
                [-sin, cos, cy + sin * cx - cos * cy],
            ]
        }
    };
    Ok(AffineTransform { m })
}

/// Resamples `img` through `t`. Lookups landing outside the pixel area
/// (further than half a pixel past the edge centers) take `fill`.
pub fn apply_affine(img: &Image, t: &AffineTransform, fill: Rgb) -> Result<Image, ImageOpsError> {
    if !t.is_finite() {
        return Err(ImageOpsError::NonFinite);
    }
    let lo = -0.5;
    let hi_x = img.width() as f64 - 0.5;
    let hi_y = img.height() as f64 - 0.5;
    Ok(Image::from_fn(img.width(), img.height(), |x, y| {
        let (sx, sy) = t.apply(x as f64, y as f64);
        if sx < lo || sy < lo || sx > hi_x || sy > hi_y {
            fill
        } else {
            quantize(sample_bilinear(img, sx, sy))
        }
    })
    .expect("dimensions unchanged"))
}

/// Magnitude of a scale or rotation preset: either fixed, or drawn uniformly
/// per image from `[lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Amount {
    Fixed(f64),
    Range(f64, f64),
}

impl Amount {
    fn draw(&self, rng: &mut SplitMix64) -> f64 {
        match *self {
            Amount::Fixed(v) => v,
            Amount::Range(lo, hi) => rng.uniform(lo, hi),
        }
    }

    fn parse(text: &str) -> Result<Self, ImageOpsError> {
        let num = |s: &str| {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| ImageOpsError::Preset(format!("bad number {s:?}")))
        };
        match text.split_once("..") {
            Some((lo, hi)) => {
                let (lo, hi) = (num(lo)?, num(hi)?);
                if lo > hi {
                    return Err(ImageOpsError::Preset(format!("empty range {text:?}")));
                }
                Ok(Amount::Range(lo, hi))
            }
            None => Ok(Amount::Fixed(num(text)?)),
        }
    }

    fn min(&self) -> f64 {
        match *self {
            Amount::Fixed(v) => v,
            Amount::Range(lo, _) => lo,
        }
    }
}

impl fmt::Display for Amount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Amount::Fixed(v) => write!(f, "{v}"),
            Amount::Range(lo, hi) => write!(f, "{lo}..{hi}"),
        }
    }
}

/// One augmentation preset as written in configs and on the command line:
/// `hflip`, `vflip`, `scale:1.2`, `rotate:15`, or ranged `scale:0.9..1.1`,
/// `rotate:-15..15`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Preset {
    HFlip,
    VFlip,
    Scale(Amount),
    Rotate(Amount),
}

impl Preset {
    /// Resolves ranged magnitudes with `rng`; fixed presets ignore it.
    pub fn draw(&self, rng: &mut SplitMix64) -> Transform {
        match self {
            Preset::HFlip => Transform::HFlip,
            Preset::VFlip => Transform::VFlip,
            Preset::Scale(a) => Transform::Scale(a.draw(rng)),
            Preset::Rotate(a) => Transform::Rotate(a.draw(rng)),
        }
    }
}

impl FromStr for Preset {
    type Err = ImageOpsError;

    fn from_str(s: &str) -> Result<Self, ImageOpsError> {
        let s = s.trim();
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n.trim(), Some(a)),
            None => (s, None),
        };
        match (name, arg) {
            ("hflip", None) => Ok(Preset::HFlip),
            ("vflip", None) => Ok(Preset::VFlip),
            ("scale", Some(a)) => {
                let amount = Amount::parse(a)?;
                if amount.min() <= 0.0 {
                    return Err(ImageOpsError::Preset(format!(
                        "scale factor must be positive in {s:?}"
                    )));
                }
                Ok(Preset::Scale(amount))
            }
            ("rotate", Some(a)) => Ok(Preset::Rotate(Amount::parse(a)?)),
            _ => Err(ImageOpsError::Preset(format!("unknown preset {s:?}"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Preset::HFlip => f.write_str("hflip"),
            Preset::VFlip => f.write_str("vflip"),
            Preset::Scale(a) => write!(f, "scale:{a}"),
            Preset::Rotate(a) => write!(f, "rotate:{a}"),
        }
    }
}

/// Comma-separated preset list; an empty string yields no presets.
pub fn parse_presets(text: &str) -> Result<Vec<Preset>, ImageOpsError> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    text.split(',').map(str::parse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn numbered(w: usize, h: usize) -> Image {
        Image::from_fn(w, h, |x, y| [(x * 13 + y) as u8, (y * 7) as u8, (x ^ y) as u8]).unwrap()
    }

    #[test]
    fn hflip_maps_edges() {
        let t = make_preset(Transform::HFlip, 256, 256).unwrap();
        assert_eq!(t.apply(0.0, 10.0), (255.0, 10.0));
        let t = make_preset(Transform::VFlip, 4, 6).unwrap();
        assert_eq!(t.apply(1.0, 0.0), (1.0, 5.0));
    }

    #[test]
    fn neutral_presets_are_identity() {
        assert_eq!(make_preset(Transform::Scale(1.0), 31, 17).unwrap(), AffineTransform::IDENTITY);
        assert_eq!(make_preset(Transform::Rotate(0.0), 31, 17).unwrap(), AffineTransform::IDENTITY);
        assert_eq!(make_preset(Transform::Rotate(360.0), 8, 8).unwrap(), AffineTransform::IDENTITY);
    }

    #[test]
    fn bad_scale_rejected() {
        assert!(make_preset(Transform::Scale(0.0), 4, 4).is_err());
        assert!(make_preset(Transform::Scale(-2.0), 4, 4).is_err());
        assert!("scale:0".parse::<Preset>().is_err());
        assert!("scale:-1..2".parse::<Preset>().is_err());
        assert!("shear:3".parse::<Preset>().is_err());
        assert!("hflip:2".parse::<Preset>().is_err());
        assert!("rotate".parse::<Preset>().is_err());
        assert!("rotate:5..1".parse::<Preset>().is_err());
    }

    #[test]
    fn scale_magnifies_about_center() {
        // s = 2: output corner samples halfway between corner and center
        let t = make_preset(Transform::Scale(2.0), 9, 9).unwrap();
        assert_eq!(t.apply(0.0, 0.0), (2.0, 2.0));
        assert_eq!(t.apply(4.0, 4.0), (4.0, 4.0));
    }

    #[test]
    fn compose_laws() {
        let t = make_preset(Transform::Rotate(33.0), 10, 7).unwrap();
        assert_eq!(compose(&AffineTransform::IDENTITY, &t), t);
        let h = make_preset(Transform::HFlip, 10, 7).unwrap();
        assert!(compose(&h, &h).max_abs_diff(&AffineTransform::IDENTITY) <= 1e-12);
        let up = make_preset(Transform::Scale(2.0), 10, 7).unwrap();
        let down = make_preset(Transform::Scale(0.5), 10, 7).unwrap();
        assert!(compose(&up, &down).max_abs_diff(&AffineTransform::IDENTITY) <= 1e-12);
    }

    #[test]
    fn compose_applies_b_then_a() {
        let a = AffineTransform::new([[2.0, 0.0, 1.0], [0.0, 1.0, 0.0]]);
        let b = AffineTransform::new([[1.0, 0.0, 0.0], [1.0, 1.0, 3.0]]);
        let (bx, by) = b.apply(1.5, -2.0);
        assert_eq!(compose(&a, &b).apply(1.5, -2.0), a.apply(bx, by));
    }

    fn arb_transform() -> impl Strategy<Value = AffineTransform> {
        proptest::array::uniform6(-3.0f64..3.0)
            .prop_map(|v| AffineTransform::new([[v[0], v[1], v[2]], [v[3], v[4], v[5]]]))
    }

    proptest! {
        #[test]
        fn compose_is_associative(a in arb_transform(), b in arb_transform(), c in arb_transform()) {
            let left = compose(&compose(&a, &b), &c);
            let right = compose(&a, &compose(&b, &c));
            prop_assert!(left.max_abs_diff(&right) <= 1e-12);
        }

        #[test]
        fn flips_are_involutions(w in 1usize..12, h in 1usize..12, seed in any::<u64>()) {
            let mut rng = SplitMix64::new(seed);
            let img = Image::from_fn(w, h, |_, _| {
                let v = rng.next_u64().to_le_bytes();
                [v[0], v[1], v[2]]
            }).unwrap();
            for t in [Transform::HFlip, Transform::VFlip] {
                let m = make_preset(t, w, h).unwrap();
                let once = apply_affine(&img, &m, [0, 0, 0]).unwrap();
                let twice = apply_affine(&once, &m, [0, 0, 0]).unwrap();
                prop_assert_eq!(&twice, &img);
            }
        }
    }

    #[test]
    fn identity_apply_is_exact() {
        let img = numbered(9, 5);
        assert_eq!(apply_affine(&img, &AffineTransform::IDENTITY, [1, 2, 3]).unwrap(), img);
    }

    #[test]
    fn hflip_mirrors_pixels() {
        let img = numbered(5, 3);
        let t = make_preset(Transform::HFlip, 5, 3).unwrap();
        let out = apply_affine(&img, &t, [0, 0, 0]).unwrap();
        for y in 0..3 {
            for x in 0..5 {
                assert_eq!(out.get(x, y), img.get(4 - x, y));
            }
        }
    }

    #[test]
    fn quarter_turn_permutes_corners() {
        // Enumerated by hand: with center (1, 1) and source = R(-90°)(out - c) + c,
        // out (x, y) reads source (y, 2 - x): TL<-BL, TR<-TL, BR<-TR, BL<-BR.
        let (tl, tr, bl, br) = ([10, 0, 0], [20, 0, 0], [30, 0, 0], [40, 0, 0]);
        let mut px = vec![[0u8; 3]; 9];
        px[0] = tl;
        px[2] = tr;
        px[6] = bl;
        px[8] = br;
        px[4] = [99, 99, 99];
        let img = Image::new(3, 3, px).unwrap();
        let out = apply_affine(&img, &make_preset(Transform::Rotate(90.0), 3, 3).unwrap(), [7, 7, 7])
            .unwrap();
        for y in 0..3 {
            for x in 0..3 {
                assert_eq!(out.get(x, y), img.get(y, 2 - x), "at ({x}, {y})");
            }
        }
        assert_eq!(out.get(0, 0), bl);
        assert_eq!(out.get(2, 0), tl);
        assert_eq!(out.get(2, 2), tr);
        assert_eq!(out.get(0, 2), br);
        assert_eq!(out.get(1, 1), [99, 99, 99]);
    }

    #[test]
    fn outside_lookups_take_fill() {
        let img = Image::filled(4, 4, [200, 200, 200]).unwrap();
        let shift = AffineTransform::new([[1.0, 0.0, 2.0], [0.0, 1.0, 0.0]]);
        let out = apply_affine(&img, &shift, [1, 2, 3]).unwrap();
        assert_eq!(out.get(1, 0), [200; 3]);
        assert_eq!(out.get(2, 0), [1, 2, 3]);
        let shrink = make_preset(Transform::Scale(0.5), 4, 4).unwrap();
        let out = apply_affine(&img, &shrink, [0, 0, 0]).unwrap();
        assert_eq!(out.get(0, 0), [0, 0, 0]);
        assert_eq!(out.get(1, 1), [200; 3]);
    }

    #[test]
    fn non_finite_rejected() {
        let img = Image::filled(2, 2, [0; 3]).unwrap();
        let bad = AffineTransform::new([[f64::NAN, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        assert!(matches!(apply_affine(&img, &bad, [0; 3]), Err(ImageOpsError::NonFinite)));
    }

    #[test]
    fn preset_text_round_trip() {
        let list = parse_presets("hflip,vflip,scale:1.2,rotate:15,rotate:-15..15,scale:0.9..1.1").unwrap();
        assert_eq!(list.len(), 6);
        assert_eq!(list[2], Preset::Scale(Amount::Fixed(1.2)));
        assert_eq!(list[4], Preset::Rotate(Amount::Range(-15.0, 15.0)));
        let text = list.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(",");
        assert_eq!(parse_presets(&text).unwrap(), list);
        assert!(parse_presets("").unwrap().is_empty());
    }
}
