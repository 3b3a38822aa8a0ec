use serde::{Deserialize, Serialize};

use super::{Image, LabeledImage, LabeledImageSet, Mask};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Rotation {
    #[serde(rename = "0")]
    R0,
    #[serde(rename = "90")]
    R90,
    #[serde(rename = "180")]
    R180,
    #[serde(rename = "270")]
    R270,
}

impl Rotation {
    pub const ALL: [Rotation; 4] = [Rotation::R0, Rotation::R90, Rotation::R180, Rotation::R270];

    fn quarter_turns(self) -> u8 {
        match self {
            Rotation::R0 => 0,
            Rotation::R90 => 1,
            Rotation::R180 => 2,
            Rotation::R270 => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flip {
    None,
    Horizontal,
    Vertical,
}

impl Flip {
    pub const ALL: [Flip; 3] = [Flip::None, Flip::Horizontal, Flip::Vertical];
}

/// Element of the symmetry group of the square: mirror left-right first
/// (if `mirrored`), then rotate clockwise by `quarter_turns × 90°`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dihedral {
    pub quarter_turns: u8,
    pub mirrored: bool,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral { quarter_turns: 0, mirrored: false };

    /// `rotation ∘ flip`. A vertical flip equals a horizontal one followed
    /// by a half turn.
    pub fn compose(rotation: Rotation, flip: Flip) -> Self {
        let r = rotation.quarter_turns();
        match flip {
            Flip::None => Self { quarter_turns: r, mirrored: false },
            Flip::Horizontal => Self { quarter_turns: r, mirrored: true },
            Flip::Vertical => Self { quarter_turns: (r + 2) % 4, mirrored: true },
        }
    }

    pub fn tag(&self) -> String {
        format!("r{}{}", self.quarter_turns as u32 * 90, if self.mirrored { "m" } else { "" })
    }

    /// Source coordinate `(y, x)` in an `h × w` input for output `(oy, ox)`.
    fn source(&self, h: usize, w: usize, oy: usize, ox: usize) -> (usize, usize) {
        // Undo the rotation; the mirrored grid is still h × w.
        let (mut y, mut x) = (oy, ox);
        let (mut ch, mut cw) = if self.quarter_turns % 2 == 0 { (h, w) } else { (w, h) };
        for _ in 0..self.quarter_turns {
            // Clockwise turn maps (y, x) in an a×b grid to (x, a-1-y) in b×a.
            let (py, px) = (cw - 1 - x, y);
            y = py;
            x = px;
            std::mem::swap(&mut ch, &mut cw);
        }
        if self.mirrored {
            x = w - 1 - x;
        }
        (y, x)
    }

    fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        if self.quarter_turns % 2 == 0 {
            (h, w)
        } else {
            (w, h)
        }
    }

    pub fn apply(&self, img: &Image) -> Image {
        let (h, w) = (img.height(), img.width());
        let (oh, ow) = self.out_dims(h, w);
        let mut data = Vec::with_capacity(img.data().len());
        for c in 0..img.channels() {
            let plane = img.plane(c);
            for oy in 0..oh {
                for ox in 0..ow {
                    let (y, x) = self.source(h, w, oy, ox);
                    data.push(plane[y * w + x]);
                }
            }
        }
        Image::new(img.channels(), oh, ow, data).expect("permutation preserves validity")
    }

    pub fn apply_mask(&self, mask: &Mask) -> Mask {
        let (oh, ow) = self.out_dims(mask.height, mask.width);
        let mut out = Mask::empty(oh, ow);
        for oy in 0..oh {
            for ox in 0..ow {
                let (y, x) = self.source(mask.height, mask.width, oy, ox);
                out.bits[oy * ow + ox] = mask.get(y, x);
            }
        }
        out
    }
}

/// Ordered list of transforms applied to every image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    transforms: Vec<Dihedral>,
}

impl AugmentPolicy {
    pub fn new(transforms: Vec<Dihedral>) -> Result<Self> {
        if transforms.is_empty() {
            return Err(Error::Config("augmentation policy has no transforms".into()));
        }
        Ok(Self { transforms })
    }

    /// Distinct group elements of `rotations × flips`, in rotation-major order.
    pub fn from_sets(rotations: &[Rotation], flips: &[Flip]) -> Result<Self> {
        let mut transforms = Vec::new();
        for &r in rotations {
            for &f in flips {
                let d = Dihedral::compose(r, f);
                if !transforms.contains(&d) {
                    transforms.push(d);
                }
            }
        }
        Self::new(transforms)
    }

    pub fn identity() -> Self {
        Self { transforms: vec![Dihedral::IDENTITY] }
    }

    /// Identity plus a left-right mirror.
    pub fn horizontal_flip() -> Self {
        Self::from_sets(&[Rotation::R0], &[Flip::None, Flip::Horizontal]).expect("non-empty")
    }

    /// The eight symmetries of the square plus the identity once more,
    /// giving a ×9 multiplier.
    pub fn full() -> Self {
        let mut p = Self::from_sets(&Rotation::ALL, &Flip::ALL).expect("non-empty");
        p.transforms.push(Dihedral::IDENTITY);
        p
    }

    pub fn transforms(&self) -> &[Dihedral] {
        &self.transforms
    }

    pub fn multiplier(&self) -> usize {
        self.transforms.len()
    }
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self::full()
    }
}

/// Image-major expansion: every input followed by its transformed copies.
pub fn augment(set: &LabeledImageSet, policy: &AugmentPolicy) -> Result<LabeledImageSet> {
    if policy.transforms.is_empty() {
        return Err(Error::Config("augmentation policy has no transforms".into()));
    }
    let mut out = Vec::with_capacity(set.len() * policy.multiplier());
    for img in set.images() {
        for (k, t) in policy.transforms.iter().enumerate() {
            let source_id = if *t == Dihedral::IDENTITY && k == 0 {
                img.source_id.clone()
            } else {
                format!("{}#{}.{k}", img.source_id, t.tag())
            };
            let mut meta = img.meta.clone();
            meta.defect_mask = meta.defect_mask.as_ref().map(|m| t.apply_mask(m));
            out.push(LabeledImage { image: t.apply(&img.image), label: img.label, source_id, meta });
        }
    }
    Ok(LabeledImageSet::new(set.name().to_owned(), out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Label;

    fn probe(h: usize, w: usize) -> Image {
        Image::from_fn(1, h, w, |_, y, x| (y * w + x) as f32 / (h * w) as f32).unwrap()
    }

    #[test]
    fn quarter_turn_is_clockwise() {
        // 2×3 grid:
        // a b c        d a
        // d e f   ->   e b
        //              f c
        let img = probe(2, 3);
        let r = Dihedral::compose(Rotation::R90, Flip::None).apply(&img);
        assert_eq!((r.height(), r.width()), (3, 2));
        let v = |y: usize, x: usize| img.get(0, y, x);
        assert_eq!(r.data(), &[v(1, 0), v(0, 0), v(1, 1), v(0, 1), v(1, 2), v(0, 2)]);
    }

    #[test]
    fn flips_are_exact() {
        let img = probe(3, 4);
        let h = Dihedral::compose(Rotation::R0, Flip::Horizontal).apply(&img);
        let v = Dihedral::compose(Rotation::R0, Flip::Vertical).apply(&img);
        for y in 0..3 {
            for x in 0..4 {
                assert_eq!(h.get(0, y, x), img.get(0, y, 3 - x));
                assert_eq!(v.get(0, y, x), img.get(0, 2 - y, x));
            }
        }
    }

    #[test]
    fn group_has_eight_distinct_bijections() {
        let img = probe(4, 4);
        let p = AugmentPolicy::from_sets(&Rotation::ALL, &Flip::ALL).unwrap();
        assert_eq!(p.multiplier(), 8);
        let outs: Vec<Image> = p.transforms().iter().map(|t| t.apply(&img)).collect();
        for (i, a) in outs.iter().enumerate() {
            let mut sorted = a.data().to_vec();
            sorted.sort_by(f32::total_cmp);
            let mut orig = img.data().to_vec();
            orig.sort_by(f32::total_cmp);
            assert_eq!(sorted, orig, "transform {i} is not a permutation");
            for b in &outs[i + 1..] {
                assert_ne!(a, b);
            }
        }
        assert_eq!(AugmentPolicy::full().multiplier(), 9);
    }

    #[test]
    fn policy_sizes() {
        let px = probe(2, 2);
        let mk = |n: usize| {
            LabeledImageSet::new(
                "s",
                (0..n).map(|i| LabeledImage::new(px.clone(), Label::Normal, format!("{i}"))).collect(),
            )
        };
        assert_eq!(augment(&mk(500), &AugmentPolicy::full()).unwrap().len(), 4500);
        assert_eq!(augment(&mk(10), &AugmentPolicy::horizontal_flip()).unwrap().len(), 20);
        let s = mk(7);
        assert_eq!(augment(&s, &AugmentPolicy::identity()).unwrap(), s);
        assert!(AugmentPolicy::new(vec![]).is_err());
    }
}
