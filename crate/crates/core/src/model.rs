//! The dual encoder: a video encoder with classification heads, projections
//! into a shared embedding space, and a frozen hashing text encoder.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ClassId, ClipSample};
use crate::error::{Error, Result};
use crate::language::{encode_text, TextDescription, TextEncoderTable};
use crate::losses::LossGrads;
use crate::numkit::{
    Affine, DenseMatrix, Layer, LayerStack, Parameters, SgdTarget, StackGrads, Tape,
};
use crate::provenance::checksum_f64;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_raw: usize,
    pub d_hidden: usize,
    pub d_feat: usize,
    pub d_embed: usize,
    pub d_text: usize,
    pub n_classes: usize,
    /// Affine+ReLU blocks in the video encoder.
    pub encoder_blocks: usize,
    /// Standardize+affine pairs in each projection.
    pub projection_depth: usize,
    pub vocab_hash_size: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            d_raw: 32,
            d_hidden: 64,
            d_feat: 32,
            d_embed: 16,
            d_text: 24,
            n_classes: 10,
            encoder_blocks: 2,
            projection_depth: 1,
            vocab_hash_size: 4096,
            temperature: 0.07,
            seed: 0,
        }
    }

    /// Feature, text and embedding widths of the full-size setup.
    pub fn full_dims() -> Self {
        Self {
            d_hidden: 512,
            d_feat: 512,
            d_embed: 512,
            d_text: 768,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full-dims" => Ok(Self::full_dims()),
            other => Err(Error::Config(format!("unknown model preset '{other}'"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_raw", self.d_raw),
            ("d_hidden", self.d_hidden),
            ("d_feat", self.d_feat),
            ("d_embed", self.d_embed),
            ("d_text", self.d_text),
            ("n_classes", self.n_classes),
            ("encoder_blocks", self.encoder_blocks),
            ("projection_depth", self.projection_depth),
            ("vocab_hash_size", self.vocab_hash_size),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }

    fn encoder_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.d_raw];
        dims.extend(std::iter::repeat_n(self.d_hidden, self.encoder_blocks - 1));
        dims.push(self.d_feat);
        dims
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub config: ModelConfig,
    pub video_encoder: LayerStack,
    pub proj_video: LayerStack,
    pub proj_text: LayerStack,
    pub head_class: LayerStack,
    pub head_region: LayerStack,
    /// Frozen: excluded from parameters and gradients.
    pub text_table: TextEncoderTable,
}

/// Normalizes each row; returns the normalized rows and the original norms.
fn normalize_rows(u: &DenseMatrix) -> Result<(DenseMatrix, Vec<f64>)> {
    let mut z = u.clone();
    let mut norms = Vec::with_capacity(u.rows());
    for r in 0..u.rows() {
        let row = z.row_mut(r);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::Numeric(format!("cannot normalize embedding with norm {n}")));
        }
        row.iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok((z, norms))
}

/// Backward of row normalization: `du = (dz − z (z·dz)) / ‖u‖`.
fn normalize_rows_backward(z: &DenseMatrix, norms: &[f64], dz: &DenseMatrix) -> DenseMatrix {
    let mut du = DenseMatrix::zeros(z.rows(), z.cols());
    for r in 0..z.rows() {
        let zr = z.row(r);
        let dzr = dz.row(r);
        let proj: f64 = zr.iter().zip(dzr).map(|(a, b)| a * b).sum();
        for (k, out) in du.row_mut(r).iter_mut().enumerate() {
            *out = (dzr[k] - zr[k] * proj) / norms[r];
        }
    }
    du
}

struct Projected {
    z: DenseMatrix,
    norms: Vec<f64>,
    tape: Tape,
}

/// Result of one batched forward pass, retaining what backward needs.
pub struct BatchForward {
    pub h_v: DenseMatrix,
    pub class_logits: DenseMatrix,
    pub region_logits: DenseMatrix,
    encoder_tape: Tape,
    class_tape: Tape,
    region_tape: Tape,
    video: Option<Projected>,
    text: Option<Projected>,
}

impl BatchForward {
    pub fn z_v(&self) -> Option<&DenseMatrix> {
        self.video.as_ref().map(|p| &p.z)
    }

    pub fn z_t(&self) -> Option<&DenseMatrix> {
        self.text.as_ref().map(|p| &p.z)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub video_encoder: StackGrads,
    pub proj_video: StackGrads,
    pub proj_text: StackGrads,
    pub head_class: StackGrads,
    pub head_region: StackGrads,
}

impl ModelGrads {
    fn parts(&self) -> [&StackGrads; 5] {
        [
            &self.video_encoder,
            &self.proj_video,
            &self.proj_text,
            &self.head_class,
            &self.head_region,
        ]
    }

    /// Flattened in the parameter order of [`ModelState`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in self.parts() {
            g.flatten_into(&mut out);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.parts().iter().all(|g| g.is_finite())
    }
}

fn single_affine(a: Affine) -> Result<LayerStack> {
    LayerStack::new(vec![Layer::Affine(a)])
}

impl ModelState {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let video_encoder = LayerStack::relu_mlp(&config.encoder_dims(), &mut rng)?;
        let proj_video =
            LayerStack::projection(config.d_feat, config.d_embed, config.projection_depth, &mut rng)?;
        let proj_text =
            LayerStack::projection(config.d_text, config.d_embed, config.projection_depth, &mut rng)?;
        let head_class = single_affine(Affine::glorot(config.d_feat, config.n_classes, &mut rng))?;
        let head_region = single_affine(Affine::glorot(config.d_feat, 2, &mut rng))?;
        let text_table = TextEncoderTable::new(
            config.vocab_hash_size,
            config.d_text,
            config.seed ^ 0x7e47_7ab1e,
        )?;
        Ok(Self {
            config: config.clone(),
            video_encoder,
            proj_video,
            proj_text,
            head_class,
            head_region,
            text_table,
        })
    }

    /// Checks that every component agrees with the recorded dimensions.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let checks = [
            ("video encoder", self.video_encoder.in_dim(), c.d_raw),
            ("video encoder output", self.video_encoder.out_dim(), c.d_feat),
            ("video projection input", self.proj_video.in_dim(), c.d_feat),
            ("video projection output", self.proj_video.out_dim(), c.d_embed),
            ("text projection input", self.proj_text.in_dim(), c.d_text),
            ("text projection output", self.proj_text.out_dim(), c.d_embed),
            ("class head input", self.head_class.in_dim(), c.d_feat),
            ("class head output", self.head_class.out_dim(), c.n_classes),
            ("region head input", self.head_region.in_dim(), c.d_feat),
            ("region head output", self.head_region.out_dim(), 2),
            ("text table", self.text_table.dim(), c.d_text),
        ];
        for (what, got, want) in checks {
            if got != want {
                return Err(Error::Config(format!("{what} has width {got}, expected {want}")));
            }
        }
        Ok(())
    }

    pub fn temperature(&self) -> f64 {
        self.config.temperature
    }

    pub fn n_classes(&self) -> usize {
        self.config.n_classes
    }

    fn stacks_mut(&mut self) -> [&mut LayerStack; 5] {
        [
            &mut self.video_encoder,
            &mut self.proj_video,
            &mut self.proj_text,
            &mut self.head_class,
            &mut self.head_region,
        ]
    }

    fn stacks(&self) -> [&LayerStack; 5] {
        [
            &self.video_encoder,
            &self.proj_video,
            &self.proj_text,
            &self.head_class,
            &self.head_region,
        ]
    }

    pub fn set_training(&mut self, training: bool) {
        for s in self.stacks_mut() {
            s.set_training(training);
        }
    }

    pub fn is_training(&self) -> bool {
        self.video_encoder.is_training()
    }

    /// `h_v` for a batch of raw clip features (one clip per row).
    pub fn features(&self, raw: &DenseMatrix) -> Result<DenseMatrix> {
        self.video_encoder.apply(raw)
    }

    /// `h_v` and the unit-norm `z_v` of one clip.
    pub fn embed_video(&self, clip: &ClipSample) -> Result<(Vec<f64>, Vec<f64>)> {
        let raw = DenseMatrix::from_vec(1, clip.raw_feature.len(), clip.raw_feature.clone())?;
        let h = self.video_encoder.apply(&raw)?;
        let z = self.project_video(&h)?;
        Ok((h.row(0).to_vec(), z.row(0).to_vec()))
    }

    /// Unit-norm video embeddings of precomputed features.
    pub fn project_video(&self, h_v: &DenseMatrix) -> Result<DenseMatrix> {
        let u = self.proj_video.apply(h_v)?;
        Ok(normalize_rows(&u)?.0)
    }

    /// Unit-norm text embeddings of pre-encoded texts (one per row).
    pub fn project_text(&self, encoded: &DenseMatrix) -> Result<DenseMatrix> {
        let u = self.proj_text.apply(encoded)?;
        Ok(normalize_rows(&u)?.0)
    }

    pub fn embed_text(&self, desc: &TextDescription) -> Result<Vec<f64>> {
        let z = self.project_text(&self.encode_texts(std::slice::from_ref(desc))?)?;
        Ok(z.row(0).to_vec())
    }

    /// Frozen text-table encodings, one row per description.
    pub fn encode_texts(&self, descs: &[TextDescription]) -> Result<DenseMatrix> {
        let rows = descs
            .iter()
            .map(|d| encode_text(d, &self.text_table))
            .collect::<Result<Vec<_>>>()?;
        DenseMatrix::from_rows(&rows)
    }

    /// Class and region logits of one feature vector. No softmax is applied.
    pub fn head_logits(&self, h_v: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let h = DenseMatrix::from_vec(1, h_v.len(), h_v.to_vec())?;
        let c = self.head_class.apply(&h)?;
        let r = self.head_region.apply(&h)?;
        Ok((c.row(0).to_vec(), r.row(0).to_vec()))
    }

    /// Batched forward pass. `encoded_text` holds one frozen text encoding
    /// per clip; when present both projections are evaluated.
    pub fn forward_batch(
        &self,
        raw: &DenseMatrix,
        encoded_text: Option<&DenseMatrix>,
    ) -> Result<BatchForward> {
        let (h_v, encoder_tape) = self.video_encoder.forward(raw)?;
        let (class_logits, class_tape) = self.head_class.forward(&h_v)?;
        let (region_logits, region_tape) = self.head_region.forward(&h_v)?;
        let (video, text) = match encoded_text {
            Some(t) => {
                if t.rows() != raw.rows() {
                    return Err(Error::Input(format!(
                        "{} clips but {} texts",
                        raw.rows(),
                        t.rows()
                    )));
                }
                let (u_v, tv) = self.proj_video.forward(&h_v)?;
                let (z_v, nv) = normalize_rows(&u_v)?;
                let (u_t, tt) = self.proj_text.forward(t)?;
                let (z_t, nt) = normalize_rows(&u_t)?;
                (
                    Some(Projected {
                        z: z_v,
                        norms: nv,
                        tape: tv,
                    }),
                    Some(Projected {
                        z: z_t,
                        norms: nt,
                        tape: tt,
                    }),
                )
            }
            None => (None, None),
        };
        Ok(BatchForward {
            h_v,
            class_logits,
            region_logits,
            encoder_tape,
            class_tape,
            region_tape,
            video,
            text,
        })
    }

    /// Backpropagates loss gradients through the pass recorded in `fwd`.
    pub fn backward_batch(&self, fwd: &BatchForward, grads: &LossGrads) -> Result<ModelGrads> {
        let n = fwd.h_v.rows();
        let mut dh = DenseMatrix::zeros(n, self.config.d_feat);
        let mut out = ModelGrads {
            video_encoder: self.video_encoder.zero_grads(),
            proj_video: self.proj_video.zero_grads(),
            proj_text: self.proj_text.zero_grads(),
            head_class: self.head_class.zero_grads(),
            head_region: self.head_region.zero_grads(),
        };
        if let Some(cls) = &grads.classification {
            let (dh_c, g_c) = self.head_class.backward(&fwd.class_tape, &cls.class_logits)?;
            let (dh_r, g_r) = self.head_region.backward(&fwd.region_tape, &cls.region_logits)?;
            dh.add_assign(&dh_c)?;
            dh.add_assign(&dh_r)?;
            out.head_class = g_c;
            out.head_region = g_r;
        }
        if let Some(con) = &grads.contrastive {
            let (video, text) = match (&fwd.video, &fwd.text) {
                (Some(v), Some(t)) => (v, t),
                _ => {
                    return Err(Error::Usage(
                        "contrastive gradients need a forward pass with texts".into(),
                    ))
                }
            };
            let dz_v = DenseMatrix::from_rows(&con.video)?;
            let dz_t = DenseMatrix::from_rows(&con.text)?;
            let du_v = normalize_rows_backward(&video.z, &video.norms, &dz_v);
            let (dh_p, g_pv) = self.proj_video.backward(&video.tape, &du_v)?;
            dh.add_assign(&dh_p)?;
            out.proj_video = g_pv;
            let du_t = normalize_rows_backward(&text.z, &text.norms, &dz_t);
            out.proj_text = self.proj_text.backward(&text.tape, &du_t)?.1;
        }
        out.video_encoder = self.video_encoder.backward(&fwd.encoder_tape, &dh)?.1;
        Ok(out)
    }

    /// Folds the batch statistics of a training-mode pass into the running
    /// statistics of both projections.
    pub fn commit_running_stats(&mut self, fwd: &BatchForward) -> Result<()> {
        self.video_encoder.commit_running_stats(&fwd.encoder_tape)?;
        if let (Some(v), Some(t)) = (&fwd.video, &fwd.text) {
            self.proj_video.commit_running_stats(&v.tape)?;
            self.proj_text.commit_running_stats(&t.tape)?;
        }
        Ok(())
    }

    /// SHA-256 over the video encoder parameters.
    pub fn backbone_checksum(&self) -> String {
        checksum_f64(&self.video_encoder.to_flat())
    }

    fn refreshed(mut self) -> Result<Self> {
        self.video_encoder = self.video_encoder.revalidated()?;
        self.proj_video = self.proj_video.revalidated()?;
        self.proj_text = self.proj_text.revalidated()?;
        self.head_class = self.head_class.revalidated()?;
        self.head_region = self.head_region.revalidated()?;
        self.validate()?;
        Ok(self)
    }
}

impl Parameters for ModelState {
    fn num_params(&self) -> usize {
        self.stacks().iter().map(|s| s.num_params()).sum()
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        for s in self.stacks() {
            s.write_params(out);
        }
    }

    fn read_params(&mut self, flat: &[f64]) -> Result<usize> {
        let mut pos = 0;
        for s in self.stacks_mut() {
            pos += s.read_params(&flat[pos.min(flat.len())..])?;
        }
        Ok(pos)
    }
}

impl SgdTarget for ModelState {
    type Grads = ModelGrads;

    fn grads_are_finite(grads: &ModelGrads) -> bool {
        grads.is_finite()
    }

    fn apply_gradients(&mut self, g: &ModelGrads, lr_backbone: f64, lr_heads: f64) -> Result<()> {
        self.video_encoder.apply_update(&g.video_encoder, lr_backbone)?;
        self.proj_video.apply_update(&g.proj_video, lr_heads)?;
        self.proj_text.apply_update(&g.proj_text, lr_heads)?;
        self.head_class.apply_update(&g.head_class, lr_heads)?;
        self.head_region.apply_update(&g.head_region, lr_heads)
    }
}

/// Facts about how a checkpoint was produced.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub config_hash: String,
    pub code_version: String,
    #[serde(default)]
    pub objective: Option<String>,
    /// Classes whose labels were visible during training.
    #[serde(default)]
    pub seen_classes: Option<Vec<ClassId>>,
    #[serde(default)]
    pub epochs_completed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub meta: CheckpointMeta,
    pub model: ModelState,
}

pub fn save_checkpoint(model: &ModelState, meta: &CheckpointMeta, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let doc = Checkpoint {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        meta: meta.clone(),
        model: model.clone(),
    };
    let json = serde_json::to_string(&doc)
        .map_err(|e| Error::Checkpoint(format!("cannot serialize checkpoint: {e}")))?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&text)
}

pub fn parse_checkpoint(text: &str) -> Result<Checkpoint> {
    let value: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| Error::Checkpoint(format!("corrupt checkpoint: {e}")))?;
    let version = value
        .get("schema_version")
        .ok_or_else(|| Error::Checkpoint("missing schema_version".into()))?
        .as_u64()
        .ok_or_else(|| Error::Checkpoint("schema_version is not an integer".into()))?;
    if version != u64::from(CHECKPOINT_SCHEMA_VERSION) {
        return Err(Error::Checkpoint(format!(
            "schema_version {version} is not supported (expected {CHECKPOINT_SCHEMA_VERSION})"
        )));
    }
    let mut doc: Checkpoint = serde_json::from_value(value)
        .map_err(|e| Error::Checkpoint(format!("corrupt checkpoint: {e}")))?;
    doc.model = doc
        .model
        .refreshed()
        .map_err(|e| Error::Checkpoint(format!("inconsistent model: {e}")))?;
    Ok(doc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::language::generate_prompt;

    fn clip(raw: Vec<f64>) -> ClipSample {
        ClipSample {
            video_id: "v".into(),
            t_start: 0.0,
            t_end: 1.0,
            raw_feature: raw,
            is_foreground: true,
            class_id: Some(0),
        }
    }

    fn raw(seed: u64) -> Vec<f64> {
        (0..32).map(|i| ((i as f64 + seed as f64) * 0.37).sin()).collect()
    }

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        let mut m = ModelState::new(&ModelConfig::desk()).unwrap();
        m.set_training(false);
        let (h1, z1) = m.embed_video(&clip(raw(1))).unwrap();
        let (h2, z2) = m.embed_video(&clip(raw(1))).unwrap();
        assert_eq!((h1.len(), z1.len()), (32, 16));
        assert_eq!((&h1, &z1), (&h2, &z2));
        assert!((z1.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        let t = generate_prompt("jump", true).unwrap();
        let zt = m.embed_text(&t).unwrap();
        assert!((zt.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(zt, m.embed_text(&t).unwrap());
    }

    #[test]
    fn head_shapes_and_zero_weights() {
        let mut m = ModelState::new(&ModelConfig::desk()).unwrap();
        let (c, r) = m.head_logits(&[0.5; 32]).unwrap();
        assert_eq!((c.len(), r.len()), (10, 2));
        m.head_class = single_affine(Affine::zeros(32, 10)).unwrap();
        m.head_region = single_affine(Affine::zeros(32, 2)).unwrap();
        let (c, r) = m.head_logits(&[0.5; 32]).unwrap();
        assert!(c.iter().chain(&r).all(|v| *v == 0.0));
    }

    #[test]
    fn wrong_feature_width_is_config_error() {
        let m = ModelState::new(&ModelConfig::desk()).unwrap();
        assert!(matches!(m.embed_video(&clip(vec![0.0; 7])), Err(Error::Config(_))));
    }

    #[test]
    fn text_table_is_not_a_parameter() {
        let m = ModelState::new(&ModelConfig::desk()).unwrap();
        let table = m.text_table.table().data().len();
        let stacks: usize = m.stacks().iter().map(|s| s.num_params()).sum();
        assert_eq!(m.num_params(), stacks);
        assert!(m.num_params() < table);
    }

    #[test]
    fn full_dims_preset() {
        let c = ModelConfig::preset("full-dims").unwrap();
        assert_eq!((c.d_feat, c.d_text, c.d_embed), (512, 768, 512));
        assert!(ModelConfig::preset("huge").is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let mut m = ModelState::new(&ModelConfig::desk()).unwrap();
        m.set_training(false);
        save_checkpoint(&m, &CheckpointMeta::default(), &path).unwrap();
        let back = load_checkpoint(&path).unwrap().model;
        assert_eq!(back, m);
        let c = clip(raw(3));
        assert_eq!(back.embed_video(&c).unwrap(), m.embed_video(&c).unwrap());
    }

    #[test]
    fn missing_or_wrong_schema_version() {
        let m = ModelState::new(&ModelConfig::desk()).unwrap();
        let mut v = serde_json::to_value(Checkpoint {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            meta: CheckpointMeta::default(),
            model: m,
        })
        .unwrap();
        v["schema_version"] = serde_json::json!(99);
        assert!(matches!(parse_checkpoint(&v.to_string()), Err(Error::Checkpoint(_))));
        v.as_object_mut().unwrap().remove("schema_version");
        assert!(matches!(parse_checkpoint(&v.to_string()), Err(Error::Checkpoint(_))));
        assert!(matches!(parse_checkpoint("{not json"), Err(Error::Checkpoint(_))));
    }
}
