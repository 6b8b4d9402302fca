//! A density over labels conditioned on `[e_t ‖ e_p]`, and its checkpoint format.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::baselines::{GmmConfig, GmmModel};
use crate::compute::{Activation, ForwardCtx, Matrix, ParamStore, StoredParam, Tape, Var};
use crate::data::LabelSchema;
use crate::density::DensityModel;
use crate::error::{Error, Result};
use crate::flows::{build_flow, FlowConfig, FlowKind, FlowModel};
use crate::personalize::{AnnotatorRegistry, DeviationStats, ProfileConfig, ProfileModule};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Nice,
    Realnvp,
    #[default]
    Maf,
    Gmm,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Nice => "nice",
            Family::Realnvp => "realnvp",
            Family::Maf => "maf",
            Family::Gmm => "gmm",
        }
    }

    pub fn flow_kind(self) -> Option<FlowKind> {
        match self {
            Family::Nice => Some(FlowKind::Nice),
            Family::Realnvp => Some(FlowKind::Realnvp),
            Family::Maf => Some(FlowKind::Maf),
            Family::Gmm => None,
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "gmm" {
            Ok(Family::Gmm)
        } else {
            Ok(match s.parse::<FlowKind>()? {
                FlowKind::Nice => Family::Nice,
                FlowKind::Realnvp => Family::Realnvp,
                FlowKind::Maf => Family::Maf,
            })
        }
    }
}

/// Dimension-free architecture description shared by every family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub family: Family,
    pub num_layers: usize,
    pub blocks_per_layer: usize,
    pub hidden_features: usize,
    pub dropout: f64,
    pub batch_norm_within: bool,
    pub batch_norm_between: bool,
    pub activation: Activation,
    /// Mixture components (gmm only).
    pub components: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            family: Family::Maf,
            num_layers: 4,
            blocks_per_layer: 1,
            hidden_features: 32,
            dropout: 0.0,
            batch_norm_within: false,
            batch_norm_between: false,
            activation: Activation::Tanh,
            components: 5,
        }
    }
}

impl ModelSpec {
    pub fn new(family: Family) -> Self {
        Self { family, ..Self::default() }
    }

    pub fn density_config(&self, dim: usize, context_dim: usize) -> DensityConfig {
        match self.family.flow_kind() {
            Some(kind) => DensityConfig::Flow(FlowConfig {
                kind,
                dim,
                context_dim,
                num_layers: self.num_layers,
                blocks_per_layer: self.blocks_per_layer,
                hidden_features: self.hidden_features,
                dropout: self.dropout,
                batch_norm_within: self.batch_norm_within,
                batch_norm_between: self.batch_norm_between,
                activation: self.activation,
            }),
            None => DensityConfig::Gmm(GmmConfig {
                components: self.components,
                dim,
                context_dim,
                hidden: vec![self.hidden_features; self.blocks_per_layer],
                activation: self.activation,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum DensityConfig {
    Flow(FlowConfig),
    Gmm(GmmConfig),
}

/// A flow or mixture density.
#[derive(Debug, Clone, PartialEq)]
pub enum Density {
    Flow(FlowModel),
    Gmm(GmmModel),
}

impl Density {
    pub fn build(config: &DensityConfig, seed: u64) -> Result<Self> {
        Ok(match config {
            DensityConfig::Flow(c) => Density::Flow(build_flow(c.clone(), seed)?),
            DensityConfig::Gmm(c) => Density::Gmm(GmmModel::new(c.clone(), seed)?),
        })
    }

    pub fn config(&self) -> DensityConfig {
        match self {
            Density::Flow(f) => DensityConfig::Flow(f.config().clone()),
            Density::Gmm(g) => DensityConfig::Gmm(g.config().clone()),
        }
    }

    fn inner(&self) -> &dyn DensityModel {
        match self {
            Density::Flow(f) => f,
            Density::Gmm(g) => g,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn DensityModel {
        match self {
            Density::Flow(f) => f,
            Density::Gmm(g) => g,
        }
    }
}

impl DensityModel for Density {
    fn dim(&self) -> usize {
        self.inner().dim()
    }

    fn context_dim(&self) -> usize {
        self.inner().context_dim()
    }

    fn params(&self) -> &ParamStore {
        self.inner().params()
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        self.inner_mut().params_mut()
    }

    fn log_prob_graph(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        y: Var,
        ctx: Var,
        fctx: &mut ForwardCtx,
    ) -> Result<Var> {
        self.inner().log_prob_graph(tape, store, y, ctx, fctx)
    }

    fn sample(&self, ctx: &[f64], n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        self.inner().sample(ctx, n, seed)
    }
}

/// `p(y | e_t, annotator)`: a density over the concatenated text and profile context.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonalizedModel {
    density: Density,
    profile: ProfileModule,
    text_dim: usize,
}

impl PersonalizedModel {
    pub fn new(spec: &ModelSpec, profile: ProfileModule, label_dim: usize, text_dim: usize, seed: u64) -> Result<Self> {
        let cfg = spec.density_config(label_dim, text_dim + profile.output_dim());
        let density = Density::build(&cfg, seed)?;
        Ok(Self { density, profile, text_dim })
    }

    pub fn density(&self) -> &Density {
        &self.density
    }

    pub fn density_mut(&mut self) -> &mut Density {
        &mut self.density
    }

    pub fn profile(&self) -> &ProfileModule {
        &self.profile
    }

    pub fn profile_mut(&mut self) -> &mut ProfileModule {
        &mut self.profile
    }

    /// Density and profile parameters, mutably.
    pub fn param_stores_mut(&mut self) -> (&mut ParamStore, &mut ParamStore) {
        (self.density.params_mut(), self.profile.params_mut())
    }

    pub fn text_dim(&self) -> usize {
        self.text_dim
    }

    pub fn dim(&self) -> usize {
        self.density.dim()
    }

    /// The density's context vector for a text embedding and annotator.
    pub fn context(&self, e_t: &[f64], annotator_id: &str) -> Result<Vec<f64>> {
        if e_t.len() != self.text_dim {
            return Err(Error::Shape(format!("expected text embedding of length {}, got {}", self.text_dim, e_t.len())));
        }
        Ok(crate::personalize::build_context(e_t, self.profile.profile_vector(annotator_id).as_deref()))
    }

    pub fn log_prob(&self, y: &[f64], e_t: &[f64], annotator_id: &str) -> Result<f64> {
        self.density.log_prob(y, &self.context(e_t, annotator_id)?)
    }

    /// Per-row `log p`, `B × 1`, reading parameters from the given stores.
    pub fn log_prob_graph(
        &self,
        tape: &mut Tape,
        density_store: &ParamStore,
        profile_store: &ParamStore,
        y: Var,
        text: Var,
        idx: &[usize],
        fctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let ctx = self.profile.context_graph(tape, profile_store, text, idx, fctx);
        self.density.log_prob_graph(tape, density_store, y, ctx, fctx)
    }

    /// Eval-mode log densities for rows of labels, text embeddings and registry indices.
    pub fn log_prob_rows(&self, y: &Matrix, text: &Matrix, idx: &[usize]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(y.rows());
        let all: Vec<usize> = (0..y.rows()).collect();
        for chunk in all.chunks(4096) {
            let mut tape = Tape::new();
            let yv = tape.constant(y.select_rows(chunk));
            let tv = tape.constant(text.select_rows(chunk));
            let ix: Vec<usize> = chunk.iter().map(|&i| idx[i]).collect();
            let lp = self.log_prob_graph(
                &mut tape,
                self.density.params(),
                self.profile.params(),
                yv,
                tv,
                &ix,
                &mut ForwardCtx::eval(),
            )?;
            out.extend_from_slice(tape.value(lp).as_slice());
        }
        Ok(out)
    }

    pub fn checksum(&self) -> String {
        let mut all = self.density.params().clone();
        for p in self.profile.params().iter() {
            all.add(p.name.clone(), p.value.clone(), p.trainable).expect("disjoint parameter names");
        }
        all.checksum()
    }

    pub fn to_checkpoint(&self, schema: &LabelSchema) -> Checkpoint {
        let mut params = self.density.params().snapshot();
        params.extend(self.profile.params().snapshot());
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            density: self.density.config(),
            profile: self.profile.config().clone(),
            registry: self.profile.registry().clone(),
            deviation_stats: self.profile.stats().cloned(),
            text_dim: self.text_dim,
            schema: schema.clone(),
            params,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Config(format!("unsupported checkpoint format_version {}", ck.format_version)));
        }
        let profile = ProfileModule::from_snapshot(
            ck.profile.clone(),
            ck.registry.clone(),
            ck.deviation_stats.clone(),
            ck.schema.dim(),
            &ck.params,
        )?;
        let mut density = Density::build(&ck.density, 0)?;
        density.params_mut().restore(&ck.params)?;
        if density.context_dim() != ck.text_dim + profile.output_dim() {
            return Err(Error::Shape("checkpoint context width does not match its profile".into()));
        }
        Ok(Self { density, profile, text_dim: ck.text_dim })
    }
}

/// Everything needed to rebuild a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub density: DensityConfig,
    pub profile: ProfileConfig,
    pub registry: AnnotatorRegistry,
    pub deviation_stats: Option<DeviationStats>,
    pub text_dim: usize,
    pub schema: LabelSchema,
    pub params: BTreeMap<String, StoredParam>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Io(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Parse { line: e.line(), message: e.to_string() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TaskKind;
    use crate::personalize::ProfileKind;

    #[test]
    fn checkpoint_round_trip() {
        let reg = AnnotatorRegistry::build(["a", "b"]).unwrap();
        for family in [Family::Maf, Family::Realnvp, Family::Gmm] {
            let profile = ProfileModule::new(
                ProfileConfig { embedding_dim: 3, ..ProfileConfig::new(ProfileKind::HubiMedium) },
                reg.clone(),
                None,
                2,
                1,
            )
            .unwrap();
            let mut m = PersonalizedModel::new(&ModelSpec::new(family), profile, 2, 4, 2).unwrap();
            m.density_mut().params_mut().jitter(5, 0.2);
            let schema = LabelSchema::uniform(2, 0.0, 4.0, 1.0, TaskKind::Ordinal).unwrap();
            let json = m.to_checkpoint(&schema).to_json().unwrap();
            assert!(json.contains("\"format_version\": 1"));
            let back = PersonalizedModel::from_checkpoint(&Checkpoint::from_json(&json).unwrap()).unwrap();
            assert_eq!(back, m);
            assert_eq!(back.checksum(), m.checksum());
            let e = [0.1, -0.2, 0.3, 0.0];
            assert_eq!(back.log_prob(&[0.3, 0.6], &e, "b").unwrap(), m.log_prob(&[0.3, 0.6], &e, "b").unwrap());
        }
    }

    #[test]
    fn family_names() {
        for f in [Family::Nice, Family::Realnvp, Family::Maf, Family::Gmm] {
            assert_eq!(f.name().parse::<Family>().unwrap(), f);
        }
        assert!("glow".parse::<Family>().is_err());
    }
}
