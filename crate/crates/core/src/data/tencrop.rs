use rand::Rng as _;

use super::image::GrayImage;
use super::DataError;
use crate::rng::Rng;

pub const TENCROP_FRACTION: f64 = 0.875;

/// `round(fraction · side)`.
pub fn crop_size(side: usize, fraction: f64) -> usize {
    (fraction * side as f64).round() as usize
}

/// Square crop of the TenCrop size at a uniformly drawn position (two draws from `rng`).
pub fn random_crop(img: &GrayImage, fraction: f64, rng: &mut Rng) -> Result<GrayImage, DataError> {
    let side = img.width().min(img.height());
    let c = crop_size(side, fraction);
    if c == 0 || c > side {
        return Err(DataError::CropTooLarge { crop: c, side });
    }
    let x0 = rng.random_range(0..=img.width() - c);
    let y0 = rng.random_range(0..=img.height() - c);
    img.crop(x0, y0, c, c)
}

/// Corner crops (TL, TR, BL, BR), the centre crop, then the horizontal mirror of each.
pub fn tencrop(img: &GrayImage, fraction: f64) -> Result<Vec<GrayImage>, DataError> {
    let side = img.width();
    if img.height() != side {
        return Err(DataError::InvalidImage(format!(
            "TenCrop needs a square image, got {}×{}",
            img.width(),
            img.height()
        )));
    }
    let c = crop_size(side, fraction);
    if c == 0 || c > side {
        return Err(DataError::CropTooLarge { crop: c, side });
    }
    let far = side - c;
    let mid = far / 2;
    let mut views = Vec::with_capacity(10);
    for (x, y) in [(0, 0), (far, 0), (0, far), (far, far), (mid, mid)] {
        views.push(img.crop(x, y, c, c)?);
    }
    for i in 0..5 {
        let m = views[i].hflip();
        views.push(m);
    }
    Ok(views)
}

/// Single centre crop of the same size TenCrop would use.
pub fn center_crop(img: &GrayImage, fraction: f64) -> Result<GrayImage, DataError> {
    let side = img.width();
    let c = crop_size(side, fraction);
    if c == 0 || c > side || img.height() != side {
        return Err(DataError::CropTooLarge { crop: c, side });
    }
    let mid = (side - c) / 2;
    img.crop(mid, mid, c, c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_and_constant_views() {
        let img = GrayImage::filled(64, 64, 77);
        let views = tencrop(&img, TENCROP_FRACTION).unwrap();
        assert_eq!(views.len(), 10);
        assert!(views.iter().all(|v| v.width() == 56 && v.height() == 56));
        assert!(views.iter().all(|v| *v == views[0]));
        assert!(tencrop(&img, 1.2).is_err());
        assert!(tencrop(&GrayImage::filled(4, 5, 0), 0.5).is_err());
    }

    #[test]
    fn order_and_mirrors() {
        let px: Vec<u8> = (0..16).collect();
        let img = GrayImage::new(4, 4, px).unwrap();
        let v = tencrop(&img, 0.5).unwrap();
        assert_eq!(v[0].pixels(), &[0, 1, 4, 5]);
        assert_eq!(v[1].pixels(), &[2, 3, 6, 7]);
        assert_eq!(v[2].pixels(), &[8, 9, 12, 13]);
        assert_eq!(v[3].pixels(), &[10, 11, 14, 15]);
        assert_eq!(v[4].pixels(), &[5, 6, 9, 10]);
        for i in 0..5 {
            assert_eq!(v[i + 5], v[i].hflip());
        }
    }

    #[test]
    fn symmetric_image_mirror_equals_centre() {
        let px = (0..64 * 64).map(|i| {
            let x = i % 64;
            (x.min(63 - x) * 4) as u8
        });
        let img = GrayImage::new(64, 64, px.collect()).unwrap();
        let v = tencrop(&img, TENCROP_FRACTION).unwrap();
        assert_eq!(v[9], v[4]);
        assert_eq!(center_crop(&img, TENCROP_FRACTION).unwrap(), v[4]);
    }

    #[test]
    fn random_crop_is_a_subrectangle() {
        let img = GrayImage::new(64, 64, (0..64 * 64).map(|i| (i % 251) as u8).collect()).unwrap();
        let mut rng = crate::rng::substream(0, crate::rng::Stream::Augment, &[]);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..20 {
            let c = random_crop(&img, TENCROP_FRACTION, &mut rng).unwrap();
            assert_eq!((c.width(), c.height()), (56, 56));
            let first = c.get(0, 0) as usize;
            let offsets: Vec<(usize, usize)> = (0..=8)
                .flat_map(|y| (0..=8).map(move |x| (x, y)))
                .filter(|&(x, y)| img.get(x, y) as usize == first)
                .filter(|&(x, y)| img.crop(x, y, 56, 56).unwrap() == c)
                .collect();
            assert!(!offsets.is_empty());
            seen.insert(offsets[0]);
        }
        assert!(seen.len() > 5);
    }
}
