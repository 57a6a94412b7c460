use crate::attention_net::AttentionMap;
use crate::data::{quantize_unit, ImageU8};

/// Blue (no attention) to red (full attention) ramp with green fixed at 0.
pub fn render_heatmap(map: &AttentionMap) -> ImageU8 {
    let (w, h) = (map.width(), map.height());
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let a = map.get(y, x);
            data.extend_from_slice(&[quantize_unit(a), 0, quantize_unit(1.0 - a)]);
        }
    }
    ImageU8::new(w, h, data).expect("attention maps are non-empty")
}
