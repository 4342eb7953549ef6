//! Video tokenization: spatio-temporal patch embedding, full-video
//! positional embeddings with linear temporal interpolation, and segment
//! splitting.
//!
//! Patches are enumerated time-major, then row-major over the spatial grid,
//! so the first `tokens_per_segment` tokens of a sequence always belong to
//! the first temporal segment. Positional embeddings span the entire video;
//! segment `tau` reads rows `[tau*N, (tau+1)*N)` of the table rather than a
//! restarted index.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::graph::{Graph, VarId};
use crate::rng::SplitRng;
use crate::tensor::Tensor;

/// Frames per segment used by the reference experiments.
pub const DEFAULT_FRAMES_PER_SEGMENT: usize = 16;

/// Spatio-temporal patch extents and embedding width.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub embed_dim: usize,
}

impl PatchConfig {
    pub fn new(
        frames: usize,
        height: usize,
        width: usize,
        channels: usize,
        embed_dim: usize,
    ) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 || channels == 0 || embed_dim == 0 {
            return Err(CoreError::config("patch extents and embed_dim must be >= 1"));
        }
        Ok(PatchConfig {
            frames,
            height,
            width,
            channels,
            embed_dim,
        })
    }

    /// Flattened input width of one patch.
    pub fn patch_dim(&self) -> usize {
        self.frames * self.height * self.width * self.channels
    }
}

/// A raw clip of shape frames x height x width x channels.
#[derive(Clone, Debug)]
pub struct VideoTensor {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    data: Tensor,
}

impl VideoTensor {
    pub fn new(frames: usize, height: usize, width: usize, channels: usize, data: Tensor) -> Result<Self> {
        let expected = frames * height * width * channels;
        if data.len() != expected {
            return Err(CoreError::shape(format!(
                "video {frames}x{height}x{width}x{channels} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(VideoTensor {
            frames,
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(frames: usize, height: usize, width: usize, channels: usize) -> Self {
        VideoTensor {
            frames,
            height,
            width,
            channels,
            data: Tensor::zeros(alloc::vec![frames, height, width, channels]),
        }
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Tensor {
        &mut self.data
    }

    #[inline]
    fn voxel(&self, f: usize, y: usize, x: usize, c: usize) -> f64 {
        self.data.data()[((f * self.height + y) * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn voxel_mut(&mut self, f: usize, y: usize, x: usize, c: usize) -> &mut f64 {
        let idx = ((f * self.height + y) * self.width + x) * self.channels + c;
        &mut self.data.data_mut()[idx]
    }

    /// Token count under `cfg`, checking divisibility.
    pub fn token_count(&self, cfg: &PatchConfig) -> Result<usize> {
        if self.frames % cfg.frames != 0
            || self.height % cfg.height != 0
            || self.width % cfg.width != 0
            || self.channels != cfg.channels
        {
            return Err(CoreError::config(format!(
                "video {}x{}x{}x{} not divisible by patch {}x{}x{} (channels {})",
                self.frames,
                self.height,
                self.width,
                self.channels,
                cfg.frames,
                cfg.height,
                cfg.width,
                cfg.channels
            )));
        }
        Ok((self.frames / cfg.frames) * (self.height / cfg.height) * (self.width / cfg.width))
    }
}

/// Learnable projection and full-video positional table.
#[derive(Clone, Debug)]
pub struct EmbedParams {
    /// Projection from flattened patch to embedding, `patch_dim x d`.
    pub projection: Tensor,
    /// Positional embeddings for the whole video, `N_T x d`.
    pub positional: Tensor,
}

impl EmbedParams {
    pub fn init(cfg: &PatchConfig, total_tokens: usize, rng: &mut SplitRng) -> Self {
        let p = cfg.patch_dim();
        let scale = 1.0 / crate::fm::sqrt(p as f64);
        EmbedParams {
            projection: rng.normal_tensor(alloc::vec![p, cfg.embed_dim], scale),
            positional: rng.normal_tensor(alloc::vec![total_tokens, cfg.embed_dim], 0.02),
        }
    }
}

/// Temporal segmentation of a token stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentPlan {
    pub segments: usize,
    pub tokens_per_segment: usize,
    /// Frames per segment when the plan came from video geometry.
    pub frames_per_segment: Option<usize>,
}

impl SegmentPlan {
    /// Plan over an already-tokenized sequence.
    pub fn for_tokens(total_tokens: usize, segments: usize) -> Result<Self> {
        if segments == 0 || total_tokens % segments != 0 {
            return Err(CoreError::config(format!(
                "{total_tokens} tokens do not divide into {segments} segments"
            )));
        }
        Ok(SegmentPlan {
            segments,
            tokens_per_segment: total_tokens / segments,
            frames_per_segment: None,
        })
    }

    /// Plan from video geometry with `frames_per_segment` frames per segment.
    pub fn for_video(
        cfg: &PatchConfig,
        frames: usize,
        height: usize,
        width: usize,
        frames_per_segment: usize,
    ) -> Result<Self> {
        if frames_per_segment == 0 || frames % frames_per_segment != 0 {
            return Err(CoreError::config(format!(
                "{frames} frames do not divide into segments of {frames_per_segment}"
            )));
        }
        if frames_per_segment % cfg.frames != 0 || height % cfg.height != 0 || width % cfg.width != 0 {
            return Err(CoreError::config(
                "segment extent not divisible by patch extent",
            ));
        }
        let tokens = (frames_per_segment / cfg.frames) * (height / cfg.height) * (width / cfg.width);
        Ok(SegmentPlan {
            segments: frames / frames_per_segment,
            tokens_per_segment: tokens,
            frames_per_segment: Some(frames_per_segment),
        })
    }

    pub fn total_tokens(&self) -> usize {
        self.segments * self.tokens_per_segment
    }

    /// Single-segment plan covering the whole sequence (joint attention).
    pub fn whole(total_tokens: usize) -> Self {
        SegmentPlan {
            segments: 1,
            tokens_per_segment: total_tokens,
            frames_per_segment: None,
        }
    }
}

/// Flattened patches, one row per token, time-major then raster order.
/// Row layout within a patch follows the video's own (frame, row, col,
/// channel) order.
pub fn extract_patches(video: &VideoTensor, cfg: &PatchConfig) -> Result<Tensor> {
    let n_tokens = video.token_count(cfg)?;
    let tp = video.frames / cfg.frames;
    let hp = video.height / cfg.height;
    let wp = video.width / cfg.width;
    let pdim = cfg.patch_dim();
    let mut out = Vec::with_capacity(n_tokens * pdim);
    for ti in 0..tp {
        for hi in 0..hp {
            for wi in 0..wp {
                for dt in 0..cfg.frames {
                    for dh in 0..cfg.height {
                        for dw in 0..cfg.width {
                            for c in 0..cfg.channels {
                                out.push(video.voxel(
                                    ti * cfg.frames + dt,
                                    hi * cfg.height + dh,
                                    wi * cfg.width + dw,
                                    c,
                                ));
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::matrix(n_tokens, pdim, out)
}

/// Token `i = E * flatten(patch_i) + P_i` over the whole video.
pub fn patch_embed(video: &VideoTensor, cfg: &PatchConfig, params: &EmbedParams) -> Result<Tensor> {
    let patches = extract_patches(video, cfg)?;
    if params.positional.rows() != patches.rows() {
        return Err(CoreError::config(format!(
            "positional table has {} rows, video produces {} tokens",
            params.positional.rows(),
            patches.rows()
        )));
    }
    patches.matmul(&params.projection)?.add(&params.positional)
}

/// Graph version of [`patch_embed`]; gradients flow into the projection and
/// positional leaves.
pub fn patch_embed_graph(
    g: &mut Graph,
    video: &VideoTensor,
    cfg: &PatchConfig,
    projection: VarId,
    positional: VarId,
) -> Result<VarId> {
    let patches = extract_patches(video, cfg)?;
    if g.value(positional).rows() != patches.rows() {
        return Err(CoreError::config(format!(
            "positional table has {} rows, video produces {} tokens",
            g.value(positional).rows(),
            patches.rows()
        )));
    }
    let patches = g.constant(patches);
    let projected = g.matmul(patches, projection)?;
    g.add(projected, positional)
}

/// Per-channel linear interpolation of positional embeddings along the
/// temporal token axis, endpoints aligned: output row `j` samples position
/// `j * (old - 1) / (new - 1)`.
pub fn interpolate_pos_emb(positional: &Tensor, new_token_count: usize) -> Result<Tensor> {
    if new_token_count < 2 {
        return Err(CoreError::config(
            "interpolate_pos_emb requires at least 2 output rows",
        ));
    }
    let old = positional.rows();
    let d = positional.cols();
    if new_token_count == old {
        return Ok(positional.clone());
    }
    let mut out = Vec::with_capacity(new_token_count * d);
    for j in 0..new_token_count {
        if old == 1 {
            out.extend_from_slice(positional.row(0));
            continue;
        }
        let pos = j as f64 * (old as f64 - 1.0) / (new_token_count as f64 - 1.0);
        let i0 = (pos as usize).min(old - 2);
        let frac = pos - i0 as f64;
        let a = positional.row(i0);
        let b = positional.row(i0 + 1);
        for k in 0..d {
            out.push((1.0 - frac) * a[k] + frac * b[k]);
        }
    }
    Tensor::matrix(new_token_count, d, out)
}

/// Contiguous split into `plan.segments` pieces; concatenating the output in
/// order reproduces the input.
pub fn split_segments(tokens: &Tensor, plan: &SegmentPlan) -> Result<Vec<Tensor>> {
    if tokens.rows() != plan.total_tokens() {
        return Err(CoreError::config(format!(
            "{} tokens do not match plan of {} x {}",
            tokens.rows(),
            plan.segments,
            plan.tokens_per_segment
        )));
    }
    (0..plan.segments)
        .map(|s| tokens.slice_rows(s * plan.tokens_per_segment, plan.tokens_per_segment))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn cfg222(d: usize) -> PatchConfig {
        PatchConfig::new(2, 2, 2, 1, d).unwrap()
    }

    #[test]
    fn token_count_formula() {
        let video = VideoTensor::zeros(4, 4, 4, 1);
        assert_eq!(video.token_count(&cfg222(8)).unwrap(), 8);
    }

    #[test]
    fn paper_segment_geometry() {
        // S=16 frames at 256x256 with 2x16x16 patches: 8*16*16 = 2048 tokens
        // per segment, so K=128 memories is a 16x compression.
        let cfg = PatchConfig::new(2, 16, 16, 1, 8).unwrap();
        let plan = SegmentPlan::for_video(&cfg, 64, 256, 256, 16).unwrap();
        assert_eq!(plan.tokens_per_segment, 2048);
        assert_eq!(plan.segments, 4);
        assert_eq!(plan.tokens_per_segment / 128, 16);
    }

    #[test]
    fn zero_video_embeds_to_positional() {
        let cfg = cfg222(4);
        let video = VideoTensor::zeros(4, 2, 2, 1);
        let mut rng = crate::rng::SplitRng::new(3);
        let params = EmbedParams::init(&cfg, 2, &mut rng);
        let tokens = patch_embed(&video, &cfg, &params).unwrap();
        assert_eq!(tokens.data(), params.positional.data());
    }

    #[test]
    fn patch_embed_is_linear_in_video() {
        let cfg = cfg222(4);
        let mut rng = crate::rng::SplitRng::new(5);
        let mut params = EmbedParams::init(&cfg, 8, &mut rng);
        params.positional = Tensor::zeros(vec![8, 4]);
        let v1 = VideoTensor::new(4, 4, 4, 1, rng.normal_tensor(vec![4, 4, 4, 1], 1.0)).unwrap();
        let v2 = VideoTensor::new(4, 4, 4, 1, rng.normal_tensor(vec![4, 4, 4, 1], 1.0)).unwrap();
        let combo = VideoTensor::new(
            4,
            4,
            4,
            1,
            v1.data().scale(2.0).add(&v2.data().scale(-3.0)).unwrap(),
        )
        .unwrap();
        let e1 = patch_embed(&v1, &cfg, &params).unwrap();
        let e2 = patch_embed(&v2, &cfg, &params).unwrap();
        let ec = patch_embed(&combo, &cfg, &params).unwrap();
        let expect = e1.scale(2.0).add(&e2.scale(-3.0)).unwrap();
        for (a, b) in ec.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn divisibility_violation_is_config_error() {
        let video = VideoTensor::zeros(3, 4, 4, 1);
        assert!(matches!(
            video.token_count(&cfg222(4)),
            Err(CoreError::InvalidConfig { .. })
        ));
    }

    #[test]
    fn interpolate_identity() {
        let p = Tensor::matrix(4, 3, (0..12).map(|v| v as f64).collect()).unwrap();
        let out = interpolate_pos_emb(&p, 4).unwrap();
        assert_eq!(out.data(), p.data());
    }

    #[test]
    fn interpolate_midpoint() {
        let p = Tensor::matrix(2, 2, vec![0.0, 10.0, 4.0, 20.0]).unwrap();
        let out = interpolate_pos_emb(&p, 3).unwrap();
        assert_eq!(out.row(0), &[0.0, 10.0]);
        assert_eq!(out.row(1), &[2.0, 15.0]);
        assert_eq!(out.row(2), &[4.0, 20.0]);
    }

    #[test]
    fn interpolate_matches_scalar_oracle() {
        let mut rng = crate::rng::SplitRng::new(17);
        let p = rng.normal_tensor(vec![4, 3], 1.0);
        let out = interpolate_pos_emb(&p, 7).unwrap();
        // Scalar piecewise-linear oracle, one channel at a time.
        for j in 0..7 {
            let pos = j as f64 * 3.0 / 6.0;
            let i0 = (pos.min(2.999) as usize).min(2);
            let frac = pos - i0 as f64;
            for k in 0..3 {
                let want = (1.0 - frac) * p.at(i0, k) + frac * p.at(i0 + 1, k);
                assert!((out.at(j, k) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn interpolate_rejects_short_output() {
        let p = Tensor::matrix(2, 2, vec![0.0; 4]).unwrap();
        assert!(interpolate_pos_emb(&p, 1).is_err());
    }

    #[test]
    fn split_single_segment_is_input() {
        let t = Tensor::matrix(6, 2, (0..12).map(|v| v as f64).collect()).unwrap();
        let plan = SegmentPlan::for_tokens(6, 1).unwrap();
        let parts = split_segments(&t, &plan).unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[0].data(), t.data());
    }

    #[test]
    fn split_is_contiguous() {
        let t = Tensor::matrix(8, 1, (0..8).map(|v| v as f64).collect()).unwrap();
        let plan = SegmentPlan::for_tokens(8, 2).unwrap();
        let parts = split_segments(&t, &plan).unwrap();
        assert_eq!(parts[0].data(), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(parts[1].data(), &[4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn split_concat_roundtrip() {
        let mut rng = crate::rng::SplitRng::new(23);
        for s in [1usize, 2, 3, 6] {
            let t = rng.normal_tensor(vec![12, 5], 1.0);
            let plan = SegmentPlan::for_tokens(12, s).unwrap();
            let parts = split_segments(&t, &plan).unwrap();
            let refs: Vec<&Tensor> = parts.iter().collect();
            let back = Tensor::concat_rows(&refs).unwrap();
            assert_eq!(back.data(), t.data());
        }
    }

    #[test]
    fn indivisible_split_errors() {
        assert!(SegmentPlan::for_tokens(7, 2).is_err());
    }

    #[test]
    fn segments_receive_full_video_positional_rows() {
        // Segment tau's tokens carry rows [tau*N, (tau+1)*N) of the
        // full-length table, never a restarted index.
        let cfg = cfg222(4);
        let video = VideoTensor::zeros(8, 4, 4, 1);
        let mut rng = crate::rng::SplitRng::new(31);
        let params = EmbedParams::init(&cfg, 16, &mut rng);
        let tokens = patch_embed(&video, &cfg, &params).unwrap();
        let plan = SegmentPlan::for_video(&cfg, 8, 4, 4, 2).unwrap();
        assert_eq!(plan.segments, 4);
        let parts = split_segments(&tokens, &plan).unwrap();
        for (tau, part) in parts.iter().enumerate() {
            let want = params
                .positional
                .slice_rows(tau * plan.tokens_per_segment, plan.tokens_per_segment)
                .unwrap();
            assert_eq!(part.data(), want.data(), "segment {tau}");
        }
    }
}
