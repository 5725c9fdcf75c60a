use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{motion_to_positions, DataError, MotionSequence, NeutralTemplate};

/// Writes frame `frame` as Wavefront OBJ vertex lines (`v x y z`, six
/// decimals), followed by 1-based triangle faces when given.
pub fn export_obj(
    template: &NeutralTemplate,
    motion: &MotionSequence,
    frame: usize,
    faces: Option<&[[usize; 3]]>,
    path: impl AsRef<Path>,
) -> Result<(), DataError> {
    if frame >= motion.frames() {
        return Err(DataError::FrameOutOfRange {
            frame,
            frames: motion.frames(),
        });
    }
    let one = motion.slice_frames(frame, 1)?;
    let positions = motion_to_positions(template, &one)?;
    let v = template.vertex_count();
    let mut text = String::with_capacity(v * 32);
    for p in positions.data().chunks(3) {
        writeln!(text, "v {:.6} {:.6} {:.6}", p[0], p[1], p[2]).expect("string write");
    }
    for f in faces.unwrap_or(&[]) {
        if f.iter().any(|&i| i >= v) {
            return Err(DataError::Invalid(format!("face {f:?} references a missing vertex")));
        }
        writeln!(text, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1).expect("string write");
    }
    let path = path.as_ref();
    fs::write(path, text).map_err(|e| DataError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;

    fn parse_vertices(text: &str) -> Vec<[f64; 3]> {
        text.lines()
            .filter_map(|l| l.strip_prefix("v "))
            .map(|rest| {
                let v: Vec<f64> = rest.split_whitespace().map(|x| x.parse().unwrap()).collect();
                [v[0], v[1], v[2]]
            })
            .collect()
    }

    fn template() -> NeutralTemplate {
        let data = (0..18).map(|i| (i as f64 * 0.37).sin()).collect();
        NeutralTemplate::new(Tensor::new(vec![6, 3], data).unwrap()).unwrap()
    }

    #[test]
    fn zero_frame_equals_template() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.obj");
        let tpl = template();
        export_obj(&tpl, &MotionSequence::zeros(2, 6, 30.0), 1, None, &path).unwrap();
        let verts = parse_vertices(&fs::read_to_string(&path).unwrap());
        assert_eq!(verts.len(), 6);
        for (v, p) in verts.iter().zip(tpl.positions().data().chunks(3)) {
            for c in 0..3 {
                assert!((v[c] - p[c]).abs() <= 5e-7);
            }
        }
    }

    #[test]
    fn parse_back_matches_positions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.obj");
        let tpl = template();
        let disp = (0..36).map(|i| (i as f64 * 1.3).cos() * 2.0).collect();
        let m = MotionSequence::new(Tensor::new(vec![2, 6, 3], disp).unwrap(), 30.0).unwrap();
        export_obj(&tpl, &m, 1, Some(&[[0, 1, 2], [3, 4, 5]]), &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let verts = parse_vertices(&text);
        let pos = motion_to_positions(&tpl, &m).unwrap();
        for (vi, v) in verts.iter().enumerate() {
            for c in 0..3 {
                assert!((v[c] - pos.data()[18 + vi * 3 + c]).abs() <= 1e-6);
            }
        }
        assert!(text.contains("f 4 5 6"));
    }

    #[test]
    fn frame_out_of_range() {
        let dir = tempfile::tempdir().unwrap();
        let err = export_obj(
            &template(),
            &MotionSequence::zeros(2, 6, 30.0),
            2,
            None,
            dir.path().join("x.obj"),
        )
        .unwrap_err();
        assert!(matches!(err, DataError::FrameOutOfRange { frame: 2, frames: 2 }));
    }
}
