//! Camera rings and point-splat depth rendering.

use crate::error::Result;
use crate::geometry::{project, Camera, Intrinsics, Rigid, Vec3};
use crate::tensor::Tensor;

pub const RING_RADIUS: f64 = 4.0;
pub const RING_HEIGHT: f64 = 2.2;
pub const RING_TARGET: Vec3 = [0.0, 0.0, 0.4];

/// `m` inward-looking cameras evenly spaced on a ring, 90° horizontal
/// field of view.
pub fn camera_ring(m: usize, width: usize, height: usize) -> Result<Vec<Camera>> {
    let f = width as f64 / 2.0;
    let k = Intrinsics { fx: f, fy: f, cx: width as f64 / 2.0, cy: height as f64 / 2.0 };
    (0..m)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / m as f64 + std::f64::consts::FRAC_PI_4;
            let eye = [RING_RADIUS * a.cos(), RING_RADIUS * a.sin(), RING_HEIGHT];
            Camera::new(k, Rigid::look_at(eye, RING_TARGET, [0.0, 0.0, 1.0])?, width, height)
        })
        .collect()
}

/// Z-buffer of projected points: each pixel keeps the smallest camera depth
/// (earliest point on ties) and 0 where nothing lands. Also returns the
/// index of the winning point per pixel.
pub fn render_with_ids(points: &Tensor, camera: &Camera) -> (Tensor, Vec<Option<usize>>) {
    let mut depth = vec![0.0; camera.pixels()];
    let mut winner = vec![None; camera.pixels()];
    for i in 0..points.rows() {
        let r = points.row_slice(i);
        let Some(p) = project([r[0], r[1], r[2]], camera) else { continue };
        let px = p.pixel(camera.width);
        if winner[px].is_none() || p.depth < depth[px] {
            depth[px] = p.depth;
            winner[px] = Some(i);
        }
    }
    let depth = Tensor::new(&[camera.height, camera.width], depth).expect("pixel count matches");
    (depth, winner)
}

pub fn render_depth(points: &Tensor, camera: &Camera) -> Tensor {
    render_with_ids(points, camera).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{back_project, CameraView, DEFAULT_DEPTH_TOL};

    fn axis_camera() -> Camera {
        let k = Intrinsics { fx: 100.0, fy: 100.0, cx: 112.0, cy: 112.0 };
        Camera::new(k, Rigid::identity(), 224, 224).unwrap()
    }

    #[test]
    fn single_point_on_axis() {
        let pts = Tensor::from_rows(&[vec![0.0, 0.0, 2.0]]).unwrap();
        let d = render_depth(&pts, &axis_camera());
        assert_eq!(d.at(112, 112), 2.0);
        assert_eq!(d.data().iter().filter(|v| **v != 0.0).count(), 1);
    }

    #[test]
    fn empty_frustum_and_nearest_wins() {
        let behind = Tensor::from_rows(&[vec![0.0, 0.0, -2.0]]).unwrap();
        assert!(render_depth(&behind, &axis_camera()).data().iter().all(|v| *v == 0.0));
        let pair = Tensor::from_rows(&[vec![0.0, 0.0, 3.0], vec![0.0, 0.0, 2.0]]).unwrap();
        let (d, ids) = render_with_ids(&pair, &axis_camera());
        assert_eq!(d.at(112, 112), 2.0);
        assert_eq!(ids[112 * 224 + 112], Some(1));
    }

    #[test]
    fn self_rendered_depth_validates_front_points() {
        let cams = camera_ring(4, 48, 32).unwrap();
        let pts = Tensor::from_rows(&[vec![0.0, 0.0, 0.4], vec![1.0, -0.5, 0.2], vec![-0.7, 0.3, 1.0]]).unwrap();
        let views: Vec<CameraView> = cams
            .iter()
            .map(|c| CameraView::new(*c, Tensor::zeros(&[32, 48, 1]), render_depth(&pts, c)).unwrap())
            .collect();
        let bp = back_project(&pts, &views, DEFAULT_DEPTH_TOL).unwrap();
        assert!(bp.valid.iter().all(|v| *v));
    }

    #[test]
    fn ring_cameras_face_the_target() {
        for cam in camera_ring(6, 64, 48).unwrap() {
            let p = project(RING_TARGET, &cam).unwrap();
            assert_eq!((p.u, p.v), (32, 24));
            assert!((cam.center()[2] - RING_HEIGHT).abs() < 1e-12);
        }
    }
}
