//! Conversions between `textwipe-core` images and `[N, C, H, W]` tensors.

use candle_core::{DType, Device, Result, Tensor};
use textwipe_core::data::PreparedSample;
use textwipe_core::{Image, SoftMask};

pub fn image_to_tensor(img: &Image, device: &Device) -> Result<Tensor> {
    let (h, w, c) = img.shape();
    Tensor::from_slice(img.data(), (h, w, c), device)?
        .permute((2, 0, 1))?
        .contiguous()?
        .unsqueeze(0)
}

pub fn images_to_tensor(imgs: &[Image], device: &Device) -> Result<Tensor> {
    let ts = imgs
        .iter()
        .map(|i| image_to_tensor(i, device))
        .collect::<Result<Vec<_>>>()?;
    Tensor::cat(&ts, 0)
}

pub fn mask_to_tensor(m: &SoftMask, device: &Device) -> Result<Tensor> {
    Tensor::from_slice(m.values(), (1, 1, m.height(), m.width()), device)
}

/// Converts sample `i` of a `[N, C, H, W]` tensor back to an image.
pub fn tensor_to_image(t: &Tensor, i: usize) -> Result<Image> {
    let (_, c, h, w) = t.dims4()?;
    let data = t
        .narrow(0, i, 1)?
        .squeeze(0)?
        .permute((1, 2, 0))?
        .to_dtype(DType::F32)?
        .flatten_all()?
        .to_vec1::<f32>()?;
    Image::from_vec(h, w, c, data).map_err(|e| candle_core::Error::Msg(e.to_string()))
}

pub fn tensor_to_images(t: &Tensor) -> Result<Vec<Image>> {
    (0..t.dim(0)?).map(|i| tensor_to_image(t, i)).collect()
}

/// A stacked training batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub i_in: Tensor,
    pub i_gt: Tensor,
    pub m_s: Tensor,
    pub s_in: Tensor,
    pub s_gt: Tensor,
}

impl Batch {
    pub fn stack(samples: &[&PreparedSample], device: &Device) -> Result<Self> {
        if samples.is_empty() {
            candle_core::bail!("empty batch");
        }
        let cat = |f: &dyn Fn(&PreparedSample) -> Result<Tensor>| -> Result<Tensor> {
            let ts = samples.iter().map(|s| f(s)).collect::<Result<Vec<_>>>()?;
            Tensor::cat(&ts, 0)
        };
        Ok(Self {
            i_in: cat(&|s| image_to_tensor(&s.i_in, device))?,
            i_gt: cat(&|s| image_to_tensor(&s.i_gt, device))?,
            m_s: cat(&|s| mask_to_tensor(&s.m_s, device))?,
            s_in: cat(&|s| image_to_tensor(&s.s_in, device))?,
            s_gt: cat(&|s| image_to_tensor(&s.s_gt, device))?,
        })
    }

    pub fn size(&self) -> usize {
        self.i_in.dim(0).unwrap_or(0)
    }
}
