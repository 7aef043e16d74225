//! Conversions between [`Image`] batches and `[B, 1, H, W]` tensors.

use lesionforge_nn::{Scalar, Tensor};

use crate::dataio::Image;
use crate::error::{Error, Result};

pub fn images_to_tensor<T: Scalar>(images: &[&Image]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::Data("empty image batch".into()))?;
    let (w, h) = (first.width(), first.height());
    let mut data = Vec::with_capacity(images.len() * w * h);
    for img in images {
        if (img.width(), img.height()) != (w, h) {
            return Err(Error::Data(format!(
                "batch mixes {}x{} and {}x{} images",
                w,
                h,
                img.width(),
                img.height()
            )));
        }
        data.extend(img.pixels().iter().map(|&p| T::lit(p as f64)));
    }
    Ok(Tensor::from_vec(&[images.len(), 1, h, w], data)?)
}

/// Splits a single-channel batch into images, clamping values into [0, 1].
pub fn tensor_to_images<T: Scalar>(t: &Tensor<T>) -> Result<Vec<Image>> {
    let (n, c, h, w) = t.dims4()?;
    if c != 1 {
        return Err(Error::Data(format!("expected one channel, got {}", c)));
    }
    t.data()
        .chunks(h * w)
        .take(n)
        .map(|px| Image::new(w, h, px.iter().map(|v| (v.as_f64().clamp(0.0, 1.0)) as f32).collect()))
        .collect()
}
