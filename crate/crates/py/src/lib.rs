//! Python bindings: anchor projection, bilinear sampling, the two
//! deformable-aggregation implementations with ledger stats, and a toy
//! end-to-end simulation.
//!
//! Dense data crosses the boundary as `(shape, flat row-major list)` pairs;
//! the smoke test in `python/` covers the full surface.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use sparse_fuse::aggregation::{
    basic_aggregate, efficient_aggregate, normalize_weights, AggregationRequest, FeaturePyramid,
    TrafficLedger,
};
use sparse_fuse::config::RunConfig;
use sparse_fuse::geometry::{self, Anchor3D, EgoMotion};
use sparse_fuse::harness::{evaluate_scene, render_features, Scene};
use sparse_fuse::model::Model;
use sparse_fuse::numerics;
use sparse_fuse::rng::derive_seed;
use sparse_fuse::tensor::Tensor;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn tensor_from(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Tensor> {
    Tensor::new(shape, data).map_err(err)
}

/// Structured 11-component instance state.
#[pyclass(name = "Anchor", from_py_object)]
#[derive(Clone)]
struct PyAnchor {
    inner: Anchor3D,
}

#[pymethods]
impl PyAnchor {
    #[new]
    #[allow(clippy::too_many_arguments)]
    #[pyo3(signature = (x, y, z, w=1.0, l=1.0, h=1.0, sin_yaw=0.0, cos_yaw=1.0, vx=0.0, vy=0.0, vz=0.0))]
    fn new(
        x: f64,
        y: f64,
        z: f64,
        w: f64,
        l: f64,
        h: f64,
        sin_yaw: f64,
        cos_yaw: f64,
        vx: f64,
        vy: f64,
        vz: f64,
    ) -> PyResult<Self> {
        Ok(PyAnchor {
            inner: Anchor3D::new(x, y, z, w, l, h, sin_yaw, cos_yaw, vx, vy, vz).map_err(err)?,
        })
    }

    /// `[x, y, z, w, l, h, sin_yaw, cos_yaw, vx, vy, vz]`
    fn to_list(&self) -> Vec<f64> {
        self.inner.to_array().to_vec()
    }

    #[getter]
    fn x(&self) -> f64 {
        self.inner.x
    }

    #[getter]
    fn y(&self) -> f64 {
        self.inner.y
    }

    #[getter]
    fn z(&self) -> f64 {
        self.inner.z
    }

    fn __repr__(&self) -> String {
        let a = self.inner;
        format!(
            "Anchor(x={:.3}, y={:.3}, z={:.3}, w={:.3}, l={:.3}, h={:.3}, yaw=({:.3}, {:.3}), v=({:.3}, {:.3}, {:.3}))",
            a.x, a.y, a.z, a.w, a.l, a.h, a.sin_yaw, a.cos_yaw, a.vx, a.vy, a.vz
        )
    }
}

/// Rigid ego transform between frames plus the elapsed time.
#[pyclass(name = "EgoMotion", from_py_object)]
#[derive(Clone)]
struct PyEgoMotion {
    inner: EgoMotion,
}

#[pymethods]
impl PyEgoMotion {
    /// `rotation` is a row-major 9-element list.
    #[new]
    fn new(rotation: Vec<f64>, translation: Vec<f64>, dt: f64) -> PyResult<Self> {
        if rotation.len() != 9 || translation.len() != 3 {
            return Err(PyValueError::new_err(
                "rotation must have 9 elements and translation 3",
            ));
        }
        let r = [
            [rotation[0], rotation[1], rotation[2]],
            [rotation[3], rotation[4], rotation[5]],
            [rotation[6], rotation[7], rotation[8]],
        ];
        Ok(PyEgoMotion {
            inner: EgoMotion::new(r, [translation[0], translation[1], translation[2]], dt)
                .map_err(err)?,
        })
    }

    /// Planar rotation about z by `angle` radians.
    #[staticmethod]
    fn planar(angle: f64, translation: Vec<f64>, dt: f64) -> PyResult<Self> {
        if translation.len() != 3 {
            return Err(PyValueError::new_err("translation must have 3 elements"));
        }
        Ok(PyEgoMotion {
            inner: EgoMotion::new(
                geometry::rot_z(angle),
                [translation[0], translation[1], translation[2]],
                dt,
            )
            .map_err(err)?,
        })
    }

    fn inverse(&self) -> Self {
        PyEgoMotion { inner: self.inner.inverse() }
    }
}

/// Temporal anchor projection: dead-reckon by `dt * velocity`, apply the
/// rigid motion, rotate the yaw embedding and velocity, keep the extent.
#[pyfunction]
fn project_anchor(anchor: &PyAnchor, motion: &PyEgoMotion) -> PyAnchor {
    PyAnchor { inner: geometry::project_anchor(&anchor.inner, &motion.inner) }
}

/// Bilinear sample of a `C x H x W` map (zero padding outside) at `(u, v)`.
#[pyfunction]
fn bilinear_sample(shape: Vec<usize>, data: Vec<f64>, u: f64, v: f64) -> PyResult<Vec<f64>> {
    let map = tensor_from(shape, data)?;
    Ok(numerics::bilinear_sample(&map, (u, v)).map_err(err)?.into_data())
}

/// Joint masked softmax over `(views, scales, groups)` per keypoint.
#[pyfunction]
fn normalize_aggregation_weights(
    shape: Vec<usize>,
    logits: Vec<f64>,
    visible: Vec<bool>,
) -> PyResult<Vec<f64>> {
    let t = tensor_from(shape, logits)?;
    Ok(normalize_weights(&t, &visible).map_err(err)?.into_data())
}

/// Deformable aggregation over a multi-view multi-scale pyramid.
///
/// `maps`: one `(shape, data)` pair per scale, each `N x C x H_s x W_s`;
/// `points`: `K x N x 2` scale-0 pixel coordinates (flat);
/// `weights`: `K x N x S x G` normalized weights (flat);
/// `mode`: `"basic"` or `"efficient"`.
///
/// Returns `(features, ledger)` where `ledger` reports the intermediate
/// buffer traffic of the chosen implementation.
#[pyfunction]
#[pyo3(signature = (maps, points_shape, points, visible, weights_shape, weights, mode="efficient"))]
#[allow(clippy::too_many_arguments)]
fn aggregate(
    py: Python<'_>,
    maps: Vec<(Vec<usize>, Vec<f64>)>,
    points_shape: Vec<usize>,
    points: Vec<f64>,
    visible: Vec<bool>,
    weights_shape: Vec<usize>,
    weights: Vec<f64>,
    mode: &str,
) -> PyResult<(Vec<f64>, Py<PyDict>)> {
    let tensors: Vec<Tensor> = maps
        .into_iter()
        .map(|(s, d)| tensor_from(s, d))
        .collect::<PyResult<_>>()?;
    let pyr = FeaturePyramid::new(tensors).map_err(err)?;
    let req = AggregationRequest::new(
        tensor_from(points_shape, points)?,
        visible,
        tensor_from(weights_shape, weights)?,
    )
    .map_err(err)?;
    let ledger = TrafficLedger::new();
    let out = match mode {
        "basic" => basic_aggregate(&pyr, &req, &ledger).map_err(err)?,
        "efficient" => efficient_aggregate(&pyr, &req, &ledger).map_err(err)?,
        other => return Err(PyValueError::new_err(format!("unknown mode '{other}'"))),
    };
    let snap = ledger.snapshot();
    let dict = PyDict::new(py);
    dict.set_item("bytes_written", snap.bytes_written)?;
    dict.set_item("bytes_read", snap.bytes_read)?;
    dict.set_item("peak_intermediate_bytes", snap.peak_intermediate_bytes)?;
    dict.set_item("aggregate_calls", snap.aggregate_calls)?;
    Ok((out.into_data(), dict.into()))
}

/// Runs the desk-scale recurrent detector on one synthetic scene and returns
/// evaluation metrics. Deterministic in `seed`.
#[pyfunction]
#[pyo3(signature = (seed=0, frames=6, objects=4))]
fn run_toy_simulation(py: Python<'_>, seed: u64, frames: usize, objects: usize) -> PyResult<Py<PyDict>> {
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.model.seed = seed;
    cfg.scene.frames = frames.max(1);
    cfg.scene.objects = objects.max(1);
    let model = Model::new(cfg.model.clone()).map_err(err)?;
    let scene = Scene::generate(&cfg.scene, cfg.model.channels, derive_seed(seed, "scene-0"))
        .map_err(err)?;
    let metrics = evaluate_scene(&model, &scene, false).map_err(err)?;
    let dict = PyDict::new(py);
    dict.set_item("recall", metrics.recall)?;
    dict.set_item("center_mae", metrics.center_mae)?;
    dict.set_item("velocity_mae", metrics.velocity_mae)?;
    dict.set_item("matched", metrics.matched)?;
    dict.set_item("gt_total", metrics.gt_total)?;
    dict.set_item("frames", metrics.frames)?;
    Ok(dict.into())
}

/// Renders one frame of a synthetic scene; returns the scale-0 map shape and
/// the number of ground-truth depth points.
#[pyfunction]
#[pyo3(signature = (seed=0, frame=0))]
fn render_scene_frame(seed: u64, frame: usize) -> PyResult<(Vec<usize>, usize)> {
    let cfg = RunConfig::default();
    let scene = Scene::generate(&cfg.scene, cfg.model.channels, derive_seed(seed, "scene-0"))
        .map_err(err)?;
    let (pyr, cloud) = render_features(
        &scene,
        frame.min(scene.frames() - 1),
        cfg.model.channels,
        cfg.model.scales,
        scene.cfg.noise_level,
    )
    .map_err(err)?;
    Ok((pyr.map(0).shape().to_vec(), cloud.len()))
}

#[pymodule]
fn sparse_fuse_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SCHEMA_VERSION", sparse_fuse::SCHEMA_VERSION)?;
    m.add_class::<PyAnchor>()?;
    m.add_class::<PyEgoMotion>()?;
    m.add_function(wrap_pyfunction!(project_anchor, m)?)?;
    m.add_function(wrap_pyfunction!(bilinear_sample, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_aggregation_weights, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate, m)?)?;
    m.add_function(wrap_pyfunction!(run_toy_simulation, m)?)?;
    m.add_function(wrap_pyfunction!(render_scene_frame, m)?)?;
    Ok(())
}
