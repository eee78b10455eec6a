//! Pointwise activations. Each forward returns the output, which doubles as
//! the backward cache.

use ndarray::Array4;

pub fn relu(x: &Array4<f32>) -> Array4<f32> {
    x.mapv(|v| v.max(0.0))
}

/// dL/dx given the forward *output* and dL/dy.
pub fn relu_backward(y: &Array4<f32>, dy: &Array4<f32>) -> Array4<f32> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, v| {
        if *v <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

pub fn leaky_relu(x: &Array4<f32>, slope: f32) -> Array4<f32> {
    x.mapv(|v| if v > 0.0 { v } else { slope * v })
}

pub fn leaky_relu_backward(y: &Array4<f32>, dy: &Array4<f32>, slope: f32) -> Array4<f32> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, v| {
        if *v <= 0.0 {
            *d *= slope;
        }
    });
    dx
}

pub fn tanh(x: &Array4<f32>) -> Array4<f32> {
    x.mapv(f32::tanh)
}

pub fn tanh_backward(y: &Array4<f32>, dy: &Array4<f32>) -> Array4<f32> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, v| *d *= 1.0 - v * v);
    dx
}

/// Hard clamp onto [-1, 1]; identity inside the range, saturating outside.
pub fn clamp_unit(x: &Array4<f32>) -> Array4<f32> {
    x.mapv(|v| v.clamp(-1.0, 1.0))
}

/// Gradient passes through strictly inside the range, zero at saturation.
pub fn clamp_unit_backward(y: &Array4<f32>, dy: &Array4<f32>) -> Array4<f32> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, v| {
        if v.abs() >= 1.0 {
            *d = 0.0;
        }
    });
    dx
}
