//! Masks of the input pixels that survive identity-bottleneck pruning.

use std::fmt::Write;
use std::fs;
use std::path::Path;

use glt_core::dictionary::BasisKind;
use glt_core::pruning::FactorizedLayer;

use crate::error::{Error, Result};

/// Per-channel binary masks plus their sum, each `height × width`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelMasks {
    pub height: usize,
    pub width: usize,
    pub channels: Vec<Vec<bool>>,
    pub sum: Vec<usize>,
}

impl PixelMasks {
    pub fn popcount(&self) -> usize {
        self.channels.iter().flatten().filter(|&&b| b).count()
    }
}

pub fn read_export(path: &Path) -> Result<FactorizedLayer> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Maps surviving input coordinates `l = c·h·w + y·w + x` back to pixels.
pub fn masks(export: &FactorizedLayer) -> Result<PixelMasks> {
    if export.u_kind != BasisKind::Identity {
        return Err(Error::InvalidArgument(format!(
            "pixel masks need an identity basis, export uses {:?}",
            export.u_kind
        )));
    }
    let shape = export
        .input_shape
        .ok_or_else(|| Error::InvalidArgument(format!("layer {} does not read an image", export.layer)))?;
    let plane = shape.height * shape.width;
    if shape.len() != export.d_in {
        return Err(Error::InvalidArgument(format!(
            "image of {} values for a layer with d_in {}",
            shape.len(),
            export.d_in
        )));
    }
    let mut channels = vec![vec![false; plane]; shape.channels];
    for &l in &export.surviving {
        if l >= export.d_in {
            return Err(Error::InvalidArgument(format!("surviving index {l} out of range")));
        }
        channels[l / plane][l % plane] = true;
    }
    let sum = (0..plane).map(|p| channels.iter().filter(|c| c[p]).count()).collect();
    Ok(PixelMasks {
        height: shape.height,
        width: shape.width,
        channels,
        sum,
    })
}

fn channel_name(c: usize, channels: usize) -> String {
    match (channels, c) {
        (3, 0) => "R".into(),
        (3, 1) => "G".into(),
        (3, 2) => "B".into(),
        _ => format!("channel {c}"),
    }
}

const CELL: usize = 6;
const GAP: usize = 16;
const LABEL: usize = 20;

/// One panel per channel (white = kept) and a grayscale sum panel.
pub fn render(m: &PixelMasks) -> String {
    let pw = m.width * CELL;
    let ph = m.height * CELL;
    let panels = m.channels.len() + 1;
    let width = panels * pw + (panels + 1) * GAP;
    let height = ph + LABEL + 2 * GAP;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    let max = m.channels.len().max(1);
    for k in 0..panels {
        let x0 = GAP + k * (pw + GAP);
        let y0 = GAP + LABEL;
        let name = if k < m.channels.len() {
            channel_name(k, m.channels.len())
        } else {
            "sum".into()
        };
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{name}</text>"#, x0 + pw / 2, GAP + 12);
        let _ = writeln!(s, r#"<rect x="{x0}" y="{y0}" width="{pw}" height="{ph}" fill="black"/>"#);
        for p in 0..m.height * m.width {
            let level = if k < m.channels.len() {
                if m.channels[k][p] {
                    max
                } else {
                    0
                }
            } else {
                m.sum[p]
            };
            if level == 0 {
                continue;
            }
            let g = 255 * level / max;
            let (y, x) = (p / m.width, p % m.width);
            let _ = writeln!(
                s,
                r#"<rect x="{}" y="{}" width="{CELL}" height="{CELL}" fill="rgb({g},{g},{g})"/>"#,
                x0 + x * CELL,
                y0 + y * CELL
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use glt_core::nn::InputShape;

    fn export(surviving: Vec<usize>, u_kind: BasisKind) -> FactorizedLayer {
        let d_in = 4 * 4 * 3;
        let m = surviving.len();
        FactorizedLayer {
            layer: 1,
            d_in,
            d_out: 2,
            m,
            u_kind,
            input_shape: Some(InputShape::new(4, 4, 3)),
            surviving,
            u_prime: vec![vec![0.0; m]; d_in],
            c_prime: vec![vec![0.0; 2]; m],
            bias: vec![0.0; 2],
        }
    }

    #[test]
    fn no_pruning_gives_full_masks() {
        let m = masks(&export((0..48).collect(), BasisKind::Identity)).unwrap();
        assert!(m.channels.iter().flatten().all(|&b| b));
        assert!(m.sum.iter().all(|&v| v == 3));
        assert_eq!(m.popcount(), 48);
    }

    #[test]
    fn index_zero_is_the_top_left_red_pixel() {
        let m = masks(&export(vec![0], BasisKind::Identity)).unwrap();
        assert!(m.channels[0][0]);
        assert_eq!(m.popcount(), 1);
        assert_eq!(m.sum[0], 1);
        // channel 2, row 1, column 3
        let m = masks(&export(vec![2 * 16 + 4 + 3], BasisKind::Identity)).unwrap();
        assert!(m.channels[2][4 + 3]);
    }

    #[test]
    fn popcount_matches_m() {
        let e = export(vec![1, 5, 17, 40, 47], BasisKind::Identity);
        assert_eq!(masks(&e).unwrap().popcount(), e.m);
    }

    #[test]
    fn non_identity_basis_is_rejected() {
        assert!(matches!(masks(&export(vec![0], BasisKind::Dct)), Err(Error::InvalidArgument(_))));
        let mut no_image = export(vec![0], BasisKind::Identity);
        no_image.input_shape = None;
        assert!(masks(&no_image).is_err());
    }

    #[test]
    fn svg_has_four_panels() {
        let svg = render(&masks(&export(vec![0, 16], BasisKind::Identity)).unwrap());
        for label in [">R<", ">G<", ">B<", ">sum<"] {
            assert!(svg.contains(label), "{label}");
        }
        // (0, 0) survives in R and G: two channel cells and one sum cell at level 2 of 3
        assert_eq!(svg.matches(r#"width="6""#).count(), 3);
        assert!(svg.contains("rgb(170,170,170)"));
    }
}
