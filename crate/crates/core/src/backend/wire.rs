//! JSON wire format of `POST /v1/generate`.

use std::collections::BTreeMap;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{BackendErrorKind, GenerationRequest, GenerationResult, TaskKind};
use crate::codec::{decode_rgb_png, encode_mask_png, encode_rgb_png};
use crate::raster::{aggregate_heatmaps, normalize_heatmap, FloatRaster, Heatmap};

pub const GENERATE_PATH: &str = "/v1/generate";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireInversionToken {
    pub token: String,
    pub embedding_b64: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub task: TaskKind,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negative_prompt: Option<String>,
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    pub steps: u32,
    pub guidance: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strength: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_image_png_b64: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_png_b64: Option<String>,
    pub tokens_of_interest: Vec<String>,
    pub inversion_tokens: Vec<WireInversionToken>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireHeatmap {
    pub token: String,
    pub width: u32,
    pub height: u32,
    /// Row-major little-endian `f32` values.
    pub data_b64: String,
    pub pre_aggregated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub image_png_b64: String,
    pub heatmaps: Vec<WireHeatmap>,
    pub backend_id: String,
}

fn protocol(field: impl Into<String>, detail: impl ToString) -> BackendErrorKind {
    BackendErrorKind::Protocol {
        field: field.into(),
        detail: detail.to_string(),
    }
}

pub fn encode_f32_le(values: &[f32]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    B64.encode(bytes)
}

pub fn encode_request(req: &GenerationRequest) -> Result<WireRequest, BackendErrorKind> {
    let png = |r: Result<Vec<u8>, crate::codec::CodecError>, field: &str| {
        r.map(|b| B64.encode(b)).map_err(|e| protocol(field, e))
    };
    let init_image_png_b64 = req
        .init_image
        .as_ref()
        .map(|img| png(encode_rgb_png(img), "init_image_png_b64"))
        .transpose()?;
    let mask_png_b64 = req
        .mask_image
        .as_ref()
        .map(|m| png(encode_mask_png(m), "mask_png_b64"))
        .transpose()?;
    let inversion_tokens = req
        .inversion_tokens
        .iter()
        .map(|t| {
            std::fs::read(&t.embedding_ref)
                .map(|bytes| WireInversionToken {
                    token: t.token.clone(),
                    embedding_b64: B64.encode(bytes),
                })
                .map_err(|e| BackendErrorKind::Embedding {
                    token: t.token.clone(),
                    detail: format!("{}: {e}", t.embedding_ref.display()),
                })
        })
        .collect::<Result<_, _>>()?;
    Ok(WireRequest {
        task: req.task,
        prompt: req.prompt.text.clone(),
        negative_prompt: req.prompt.negative_text.clone(),
        seed: req.seed,
        width: req.width,
        height: req.height,
        steps: req.steps,
        guidance: req.guidance,
        strength: req.strength,
        init_image_png_b64,
        mask_png_b64,
        tokens_of_interest: req.unique_tokens().into_iter().map(String::from).collect(),
        inversion_tokens,
    })
}

/// Server-side helper: serializes a finished result with pre-aggregated maps.
pub fn encode_response(result: &GenerationResult) -> Result<WireResponse, BackendErrorKind> {
    let image = encode_rgb_png(&result.image).map_err(|e| protocol("image_png_b64", e))?;
    Ok(WireResponse {
        image_png_b64: B64.encode(image),
        heatmaps: result
            .heatmaps
            .iter()
            .map(|(token, h)| WireHeatmap {
                token: token.clone(),
                width: h.width(),
                height: h.height(),
                data_b64: encode_f32_le(h.values()),
                pre_aggregated: true,
            })
            .collect(),
        backend_id: result.backend_id.clone(),
    })
}

fn decode_map(i: usize, hm: &WireHeatmap) -> Result<FloatRaster, BackendErrorKind> {
    let field = format!("heatmaps[{i}].data_b64");
    let bytes = B64.decode(&hm.data_b64).map_err(|e| protocol(&field, e))?;
    let expected = hm.width as usize * hm.height as usize * 4;
    if bytes.len() != expected {
        return Err(protocol(
            field,
            format!(
                "{} bytes, {}x{} needs {expected}",
                bytes.len(),
                hm.width,
                hm.height
            ),
        ));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
        .collect();
    FloatRaster::new(hm.width, hm.height, values)
        .map_err(|e| protocol(format!("heatmaps[{i}].width"), e))
}

/// Parses a response body. Pre-aggregated maps must match the image size and
/// are normalized; raw maps for a token are aggregated at image resolution.
pub fn decode_response(
    req: &GenerationRequest,
    body: &[u8],
) -> Result<GenerationResult, BackendErrorKind> {
    let resp: WireResponse = serde_json::from_slice(body).map_err(|e| protocol("body", e))?;
    let png = B64
        .decode(&resp.image_png_b64)
        .map_err(|e| protocol("image_png_b64", e))?;
    let image = decode_rgb_png(&png).map_err(|e| protocol("image_png_b64", e))?;
    let (iw, ih) = (image.width(), image.height());

    let mut grouped: BTreeMap<&str, Vec<(usize, &WireHeatmap)>> = BTreeMap::new();
    for (i, hm) in resp.heatmaps.iter().enumerate() {
        grouped.entry(hm.token.as_str()).or_default().push((i, hm));
    }

    let mut heatmaps: BTreeMap<String, Heatmap> = BTreeMap::new();
    for (token, entries) in grouped {
        let heatmap = if let Some(&(i, hm)) = entries.iter().find(|(_, h)| h.pre_aggregated) {
            if entries.len() > 1 {
                return Err(protocol(
                    format!("heatmaps[{i}].pre_aggregated"),
                    format!("token '{token}' has a pre-aggregated map plus other entries"),
                ));
            }
            if (hm.width, hm.height) != (iw, ih) {
                return Err(BackendErrorKind::DimensionMismatch {
                    what: format!("heatmaps[{i}] ('{token}')"),
                    actual_w: hm.width,
                    actual_h: hm.height,
                    expected_w: iw,
                    expected_h: ih,
                });
            }
            normalize_heatmap(&decode_map(i, hm)?)
                .map_err(|e| protocol(format!("heatmaps[{i}].data_b64"), e))?
        } else {
            let maps = entries
                .iter()
                .map(|&(i, hm)| decode_map(i, hm))
                .collect::<Result<Vec<_>, _>>()?;
            let first = entries[0].0;
            aggregate_heatmaps(&maps, iw, ih)
                .map_err(|e| protocol(format!("heatmaps[{first}].data_b64"), e))?
        };
        heatmaps.insert(token.to_string(), heatmap);
    }

    Ok(GenerationResult {
        image,
        heatmaps,
        echo: req.clone(),
        backend_id: resp.backend_id,
        ground_truth: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::synthetic::synthetic_generate;
    use crate::raster::ImageRaster;
    use crate::templating::ExpandedPrompt;

    fn request(tokens: &[&str], w: u32, h: u32) -> GenerationRequest {
        let prompt = ExpandedPrompt {
            template_id: "tpl".into(),
            text: "a sedan".into(),
            negative_text: Some("blurry".into()),
            bindings: Default::default(),
            tokens_of_interest: tokens.iter().map(|s| s.to_string()).collect(),
        };
        GenerationRequest::text_to_image(prompt, 5, w, h)
    }

    fn png_b64(w: u32, h: u32) -> String {
        B64.encode(encode_rgb_png(&ImageRaster::filled(w, h, [9, 9, 9]).unwrap()).unwrap())
    }

    #[test]
    fn request_fields_follow_protocol() {
        let mut req = request(&["sedan", "sedan", "road"], 64, 64);
        req.task = TaskKind::Inpaint;
        req.init_image = Some(ImageRaster::filled(64, 64, [1, 1, 1]).unwrap());
        req.mask_image = Some(crate::raster::BinaryMask::empty(64, 64).unwrap());
        req.strength = Some(0.6);
        let wire = encode_request(&req).unwrap();
        let json: serde_json::Value = serde_json::to_value(&wire).unwrap();
        assert_eq!(json["task"], "inpaint");
        assert_eq!(json["negative_prompt"], "blurry");
        assert_eq!(json["tokens_of_interest"], serde_json::json!(["sedan", "road"]));
        assert!(json["init_image_png_b64"].is_string());
        assert!(json["mask_png_b64"].is_string());
        assert_eq!(json["strength"], 0.6);
        assert_eq!(json["inversion_tokens"], serde_json::json!([]));

        let t2i = serde_json::to_value(encode_request(&request(&[], 64, 64)).unwrap()).unwrap();
        assert!(t2i.get("strength").is_none());
        assert!(t2i.get("init_image_png_b64").is_none());
    }

    #[test]
    fn inversion_embedding_is_inlined() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("piano.bin");
        std::fs::write(&path, [1u8, 2, 3]).unwrap();
        let mut req = request(&["grand-piano"], 64, 64);
        req.inversion_tokens.push(crate::backend::InversionToken {
            token: "<grand-piano>".into(),
            embedding_ref: path,
        });
        let wire = encode_request(&req).unwrap();
        assert_eq!(wire.inversion_tokens[0].embedding_b64, B64.encode([1u8, 2, 3]));
        req.inversion_tokens[0].embedding_ref = dir.path().join("missing.bin");
        assert!(matches!(
            encode_request(&req),
            Err(BackendErrorKind::Embedding { .. })
        ));
    }

    #[test]
    fn pre_aggregated_passthrough() {
        let req = request(&["sedan"], 32, 32);
        let values: Vec<f32> = (0..32 * 32).map(|i| (i % 7) as f32 * 3.0).collect();
        let resp = WireResponse {
            image_png_b64: png_b64(32, 32),
            heatmaps: vec![WireHeatmap {
                token: "sedan".into(),
                width: 32,
                height: 32,
                data_b64: encode_f32_le(&values),
                pre_aggregated: true,
            }],
            backend_id: "srv".into(),
        };
        let out = decode_response(&req, &serde_json::to_vec(&resp).unwrap()).unwrap();
        let expect = normalize_heatmap(&FloatRaster::new(32, 32, values).unwrap()).unwrap();
        assert_eq!(out.heatmaps["sedan"], expect);
        assert_eq!(out.backend_id, "srv");
    }

    #[test]
    fn raw_maps_are_aggregated_to_image_size() {
        let req = request(&["sedan"], 64, 64);
        let maps: Vec<FloatRaster> = (0..3)
            .map(|k| FloatRaster::from_fn(8, 8, |x, y| (x * (k + 1) + y) as f32).unwrap())
            .collect();
        let resp = WireResponse {
            image_png_b64: png_b64(64, 64),
            heatmaps: maps
                .iter()
                .map(|m| WireHeatmap {
                    token: "sedan".into(),
                    width: 8,
                    height: 8,
                    data_b64: encode_f32_le(m.values()),
                    pre_aggregated: false,
                })
                .collect(),
            backend_id: "srv".into(),
        };
        let out = decode_response(&req, &serde_json::to_vec(&resp).unwrap()).unwrap();
        let h = &out.heatmaps["sedan"];
        assert_eq!((h.width(), h.height()), (64, 64));
        assert_eq!(h, &aggregate_heatmaps(&maps, 64, 64).unwrap());
    }

    #[test]
    fn truncated_payload_names_field() {
        let req = request(&["sedan"], 8, 8);
        let full = encode_f32_le(&[0.5; 64]);
        let resp = WireResponse {
            image_png_b64: png_b64(8, 8),
            heatmaps: vec![WireHeatmap {
                token: "sedan".into(),
                width: 8,
                height: 8,
                data_b64: full[..full.len() - 9].to_string(),
                pre_aggregated: true,
            }],
            backend_id: "srv".into(),
        };
        match decode_response(&req, &serde_json::to_vec(&resp).unwrap()) {
            Err(BackendErrorKind::Protocol { field, .. }) => assert_eq!(field, "heatmaps[0].data_b64"),
            other => panic!("{other:?}"),
        }
        let mut bad = resp.clone();
        bad.image_png_b64 = "@@@".into();
        match decode_response(&req, &serde_json::to_vec(&bad).unwrap()) {
            Err(BackendErrorKind::Protocol { field, .. }) => assert_eq!(field, "image_png_b64"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            decode_response(&req, b"{\"image_png_b64\": 1}"),
            Err(BackendErrorKind::Protocol { .. })
        ));
    }

    #[test]
    fn pre_aggregated_size_mismatch() {
        let req = request(&["sedan"], 16, 16);
        let resp = WireResponse {
            image_png_b64: png_b64(16, 16),
            heatmaps: vec![WireHeatmap {
                token: "sedan".into(),
                width: 8,
                height: 8,
                data_b64: encode_f32_le(&[0.5; 64]),
                pre_aggregated: true,
            }],
            backend_id: "srv".into(),
        };
        assert!(matches!(
            decode_response(&req, &serde_json::to_vec(&resp).unwrap()),
            Err(BackendErrorKind::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn synthetic_result_round_trips_through_wire() {
        let req = request(&["sedan"], 32, 32);
        let result = synthetic_generate(&req, "synthetic-v1");
        let wire = encode_response(&result).unwrap();
        let back = decode_response(&req, &serde_json::to_vec(&wire).unwrap()).unwrap();
        assert_eq!(back.image, result.image);
        assert_eq!(back.heatmaps, result.heatmaps);
    }
}
