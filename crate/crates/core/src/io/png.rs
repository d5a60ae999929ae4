//! 8-bit PNG output: ROI zone masks and viridis heatmaps.

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use ndarray::Array2;
use std::fs;
use std::path::Path;

use crate::dataset::Zone;
use crate::error::{DatError, Result};

const ZONE_BACKGROUND: u8 = 0;
const ZONE_BUFFER: u8 = 128;
const ZONE_STRIATUM: u8 = 255;

/// Persists a zone mask as an 8-bit grayscale PNG
/// (0 background / 128 buffer / 255 striatum).
pub fn write_zone_png(path: &Path, zones: &Array2<Zone>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let (h, w) = zones.dim();
    let img: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([match zones[[y as usize, x as usize]] {
            Zone::Background => ZONE_BACKGROUND,
            Zone::Buffer => ZONE_BUFFER,
            Zone::Striatum => ZONE_STRIATUM,
        }])
    });
    img.save(path)
        .map_err(|e| DatError::format(format!("png encode: {e}")))
}

/// Reads a mask written by [`write_zone_png`]; any other gray level fails.
pub fn read_zone_png(path: &Path) -> Result<Array2<Zone>> {
    let img = image::open(path)
        .map_err(|e| DatError::format(format!("png decode: {e}")))?
        .to_luma8();
    let (w, h) = img.dimensions();
    let mut zones = Array2::from_elem((h as usize, w as usize), Zone::Background);
    for (x, y, pixel) in img.enumerate_pixels() {
        zones[[y as usize, x as usize]] = match pixel.0[0] {
            ZONE_BACKGROUND => Zone::Background,
            ZONE_BUFFER => Zone::Buffer,
            ZONE_STRIATUM => Zone::Striatum,
            other => {
                return Err(DatError::format(format!(
                    "unexpected gray level {other} in zone mask"
                )))
            }
        };
    }
    Ok(zones)
}

/// Frozen 256-entry perceptually-uniform (viridis-style) RGB lookup table.
/// Figures must be byte-reproducible across toolchains, so the table is a
/// literal rather than anything computed at runtime.
#[rustfmt::skip]
pub const VIRIDIS_LUT: [[u8; 3]; 256] = [
    [68, 1, 84], [68, 2, 85], [68, 4, 87], [69, 5, 88],
    [69, 7, 90], [69, 8, 91], [69, 10, 92], [70, 11, 94],
    [70, 13, 95], [70, 14, 97], [70, 16, 98], [71, 17, 100],
    [71, 19, 101], [71, 20, 102], [71, 22, 104], [72, 23, 105],
    [72, 25, 107], [72, 26, 108], [72, 27, 109], [72, 28, 110],
    [72, 30, 111], [72, 31, 112], [72, 32, 113], [72, 33, 114],
    [72, 35, 115], [72, 36, 116], [71, 37, 117], [71, 38, 118],
    [71, 40, 119], [71, 41, 120], [71, 42, 121], [71, 43, 122],
    [71, 45, 123], [71, 46, 124], [71, 47, 125], [71, 48, 126],
    [70, 49, 126], [70, 51, 127], [70, 52, 127], [69, 53, 128],
    [69, 54, 129], [69, 56, 129], [68, 57, 130], [68, 58, 130],
    [67, 59, 131], [67, 61, 131], [67, 62, 132], [66, 63, 133],
    [66, 64, 133], [66, 66, 134], [65, 67, 134], [65, 68, 135],
    [65, 69, 135], [64, 70, 136], [64, 71, 136], [63, 72, 136],
    [63, 73, 136], [62, 74, 137], [62, 75, 137], [61, 76, 137],
    [61, 78, 138], [60, 79, 138], [60, 80, 138], [59, 81, 139],
    [59, 82, 139], [58, 83, 139], [58, 84, 139], [57, 85, 140],
    [57, 86, 140], [57, 87, 140], [56, 88, 140], [56, 89, 140],
    [55, 90, 140], [55, 91, 141], [54, 92, 141], [54, 93, 141],
    [53, 94, 141], [53, 96, 141], [52, 97, 141], [52, 98, 141],
    [51, 99, 141], [51, 100, 142], [50, 101, 142], [50, 102, 142],
    [49, 103, 142], [49, 104, 142], [49, 105, 142], [48, 106, 142],
    [48, 107, 142], [47, 108, 142], [47, 109, 142], [47, 110, 142],
    [46, 111, 142], [46, 112, 142], [45, 112, 142], [45, 113, 142],
    [44, 114, 142], [44, 115, 142], [44, 116, 142], [43, 117, 142],
    [43, 118, 142], [42, 119, 142], [42, 120, 142], [42, 121, 142],
    [41, 122, 142], [41, 123, 142], [40, 124, 142], [40, 125, 142],
    [40, 126, 142], [39, 127, 142], [39, 128, 142], [38, 128, 142],
    [38, 129, 142], [37, 130, 142], [37, 131, 142], [37, 132, 142],
    [36, 133, 142], [36, 134, 142], [35, 135, 142], [35, 136, 142],
    [35, 137, 142], [35, 138, 142], [34, 139, 141], [34, 140, 141],
    [34, 141, 141], [34, 142, 141], [33, 143, 141], [33, 144, 141],
    [33, 144, 140], [33, 145, 140], [32, 146, 140], [32, 147, 140],
    [32, 148, 140], [32, 149, 140], [31, 150, 139], [31, 151, 139],
    [31, 152, 139], [31, 153, 139], [31, 154, 138], [32, 155, 138],
    [32, 156, 137], [32, 157, 137], [32, 158, 137], [32, 159, 136],
    [32, 160, 136], [33, 160, 135], [33, 161, 135], [33, 162, 134],
    [33, 163, 134], [33, 164, 134], [33, 165, 133], [34, 166, 133],
    [34, 167, 132], [34, 168, 132], [35, 169, 131], [36, 170, 131],
    [37, 171, 130], [38, 172, 129], [40, 172, 129], [41, 173, 128],
    [42, 174, 127], [43, 175, 127], [44, 176, 126], [45, 177, 126],
    [46, 178, 125], [47, 179, 124], [49, 179, 124], [50, 180, 123],
    [51, 181, 122], [52, 182, 122], [53, 183, 121], [55, 184, 120],
    [57, 185, 119], [58, 185, 118], [60, 186, 117], [62, 187, 116],
    [64, 188, 115], [66, 189, 114], [68, 190, 113], [69, 190, 112],
    [71, 191, 111], [73, 192, 110], [75, 193, 109], [77, 194, 108],
    [79, 195, 107], [80, 195, 106], [82, 196, 105], [84, 197, 104],
    [86, 198, 103], [88, 198, 101], [91, 199, 100], [93, 200, 99],
    [95, 201, 97], [97, 201, 96], [100, 202, 95], [102, 203, 93],
    [104, 203, 92], [106, 204, 90], [109, 205, 89], [111, 205, 88],
    [113, 206, 86], [115, 207, 85], [118, 208, 84], [120, 208, 82],
    [122, 209, 81], [125, 210, 79], [127, 210, 78], [130, 211, 76],
    [132, 211, 75], [135, 212, 73], [137, 213, 71], [140, 213, 70],
    [142, 214, 68], [145, 214, 67], [147, 215, 65], [150, 215, 64],
    [152, 216, 62], [155, 217, 60], [157, 217, 59], [160, 218, 57],
    [162, 218, 56], [165, 219, 54], [168, 219, 52], [170, 220, 51],
    [173, 220, 49], [176, 221, 48], [178, 221, 46], [181, 221, 44],
    [184, 222, 43], [186, 222, 41], [189, 223, 40], [191, 223, 38],
    [194, 224, 37], [197, 224, 35], [199, 224, 33], [202, 225, 32],
    [205, 225, 30], [207, 226, 29], [210, 226, 27], [213, 226, 28],
    [215, 227, 28], [218, 227, 29], [220, 227, 29], [223, 227, 30],
    [225, 228, 31], [228, 228, 31], [230, 228, 32], [233, 229, 32],
    [235, 229, 33], [238, 229, 33], [240, 230, 34], [243, 230, 35],
    [245, 230, 35], [248, 230, 36], [250, 231, 36], [253, 231, 37],
];

fn viridis(t: f32) -> [u8; 3] {
    let idx = (t.clamp(0.0, 1.0) * 255.0).round() as usize;
    VIRIDIS_LUT[idx.min(255)]
}

fn render_panel(img: &mut RgbImage, x0: u32, data: &Array2<f32>, vmin: f32, vmax: f32) {
    let span = (vmax - vmin).max(1e-12);
    for ((y, x), &v) in data.indexed_iter() {
        let t = (v - vmin) / span;
        img.put_pixel(x0 + x as u32, y as u32, Rgb(viridis(t)));
    }
}

/// Writes one image as a viridis-colored PNG over `[vmin, vmax]`.
pub fn write_heatmap_png(path: &Path, data: &Array2<f32>, vmin: f32, vmax: f32) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let (h, w) = data.dim();
    let mut img = RgbImage::new(w as u32, h as u32);
    render_panel(&mut img, 0, data, vmin, vmax);
    img.save(path)
        .map_err(|e| DatError::format(format!("png encode: {e}")))
}

/// Writes a side-by-side triptych (e.g. screening | forecast | target) with a
/// shared color scale and a 2-pixel separator.
pub fn write_triptych_png(
    path: &Path,
    panels: [&Array2<f32>; 3],
    vmin: f32,
    vmax: f32,
) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let (h, w) = panels[0].dim();
    for p in &panels {
        if p.dim() != (h, w) {
            return Err(DatError::validation("triptych panels must share a shape"));
        }
    }
    let gap = 2u32;
    let mut img = RgbImage::from_pixel(
        (w as u32) * 3 + gap * 2,
        h as u32,
        Rgb([255, 255, 255]),
    );
    for (i, panel) in panels.iter().enumerate() {
        render_panel(&mut img, i as u32 * (w as u32 + gap), panel, vmin, vmax);
    }
    img.save(path)
        .map_err(|e| DatError::format(format!("png encode: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::tempdir;

    #[test]
    fn zone_mask_round_trips() {
        let dir = tempdir();
        let path = dir.join("mask.png");
        let mut zones = Array2::from_elem((8, 8), Zone::Background);
        zones[[2, 3]] = Zone::Striatum;
        zones[[2, 4]] = Zone::Striatum;
        zones[[3, 3]] = Zone::Buffer;
        write_zone_png(&path, &zones).unwrap();
        let back = read_zone_png(&path).unwrap();
        assert_eq!(back, zones);
        std::fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn rejects_foreign_gray_levels() {
        let dir = tempdir();
        let path = dir.join("bad.png");
        let img: GrayImage = ImageBuffer::from_fn(4, 4, |_, _| Luma([37u8]));
        img.save(&path).unwrap();
        assert!(read_zone_png(&path).is_err());
        std::fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn heatmap_and_triptych_have_expected_dimensions() {
        let dir = tempdir();
        let a = Array2::from_shape_fn((6, 5), |(y, x)| (y + x) as f32);
        write_heatmap_png(&dir.join("h.png"), &a, 0.0, 9.0).unwrap();
        let img = image::open(dir.join("h.png")).unwrap();
        assert_eq!((img.width(), img.height()), (5, 6));

        write_triptych_png(&dir.join("t.png"), [&a, &a, &a], 0.0, 9.0).unwrap();
        let img = image::open(dir.join("t.png")).unwrap();
        assert_eq!((img.width(), img.height()), (5 * 3 + 4, 6));

        let b = Array2::zeros((3, 3));
        assert!(write_triptych_png(&dir.join("x.png"), [&a, &b, &a], 0.0, 1.0).is_err());
        std::fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn viridis_endpoints_match_reference() {
        assert_eq!(viridis(0.0), [68, 1, 84]);
        assert_eq!(viridis(1.0), [253, 231, 37]);
    }
}
