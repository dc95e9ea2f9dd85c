//! Permutation-invariant outcome networks.
//!
//! * [`PieModel`]: `psi(center ++ mean_j phi(neighbor_j))`.
//! * [`MeanFieldModel`]: `psi(center ++ mean_j neighbor_j)`, i.e. the PIE
//!   structure with `phi` fixed to the identity.
//! * [`PpieModel`]: inputs split into groups, each averaged through its own
//!   `phi_p`; invariant to permutations within a group only.
//!
//! A region's input row is its confounder vector followed by its treatment,
//! so rows have length `M + 1`. Neighbor rows are passed as one flat slice
//! with that stride.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{AdamConfig, AdamState, MlpGrads, MlpParams, Tape};
use crate::rng::sub_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionFeature {
    pub confounder: Vec<f64>,
    pub treatment: f64,
}

impl RegionFeature {
    pub fn new(confounder: Vec<f64>, treatment: f64) -> Self {
        RegionFeature {
            confounder,
            treatment,
        }
    }

    /// Confounder followed by treatment.
    pub fn row(&self) -> Vec<f64> {
        let mut r = self.confounder.clone();
        r.push(self.treatment);
        r
    }
}

fn flatten_rows(m: usize, center: &RegionFeature, neighbors: &[RegionFeature]) -> Result<(Vec<f64>, Vec<f64>)> {
    if center.confounder.len() != m {
        return shape_err(format!("center confounder length {} != {m}", center.confounder.len()));
    }
    let mut flat = Vec::with_capacity(neighbors.len() * (m + 1));
    for (j, n) in neighbors.iter().enumerate() {
        if n.confounder.len() != m {
            return shape_err(format!("neighbor {j} confounder length {} != {m}", n.confounder.len()));
        }
        flat.extend_from_slice(&n.confounder);
        flat.push(n.treatment);
    }
    Ok((center.row(), flat))
}

fn require_neighbors(neighbors: &[RegionFeature]) -> Result<()> {
    if neighbors.is_empty() {
        return Err(Error::DegenerateNeighborhood(
            "neighbor list is empty".into(),
        ));
    }
    Ok(())
}

/// Hidden-layer layout shared by every network in a model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub hidden: usize,
    pub depth: usize,
    pub d_emb: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            hidden: 32,
            depth: 2,
            d_emb: 16,
        }
    }
}

impl Architecture {
    fn sizes(&self, input: usize, output: usize) -> Vec<usize> {
        let mut s = vec![input];
        s.extend(std::iter::repeat_n(self.hidden, self.depth));
        s.push(output);
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PieModel {
    pub phi: MlpParams,
    pub psi: MlpParams,
    m: usize,
    d_emb: usize,
}

impl PieModel {
    pub fn new(m: usize, arch: Architecture, seed: u64) -> Result<Self> {
        let phi = MlpParams::init(&arch.sizes(m + 1, arch.d_emb), sub_seed(seed, 0))?;
        let psi = MlpParams::init(&arch.sizes(m + 1 + arch.d_emb, 1), sub_seed(seed, 1))?;
        PieModel::from_parts(m, phi, psi)
    }

    pub fn from_parts(m: usize, phi: MlpParams, psi: MlpParams) -> Result<Self> {
        let d_emb = phi.output_dim();
        if phi.input_dim() != m + 1 {
            return shape_err(format!("phi input dim {} != M+1 = {}", phi.input_dim(), m + 1));
        }
        if psi.input_dim() != m + 1 + d_emb {
            return shape_err(format!(
                "psi input dim {} != M+1+d_emb = {}",
                psi.input_dim(),
                m + 1 + d_emb
            ));
        }
        if psi.output_dim() != 1 {
            return shape_err("psi must have a scalar output");
        }
        Ok(PieModel { phi, psi, m, d_emb })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn d_emb(&self) -> usize {
        self.d_emb
    }

    pub fn forward(&self, center: &RegionFeature, neighbors: &[RegionFeature]) -> Result<f64> {
        require_neighbors(neighbors)?;
        let (c, n) = flatten_rows(self.m, center, neighbors)?;
        let mut ws = Workspace::default();
        Ok(forward_pie(self, &c, &n, &mut ws))
    }

    /// Exact gradients of `upstream * forward(center, neighbors)`.
    pub fn gradients(
        &self,
        center: &RegionFeature,
        neighbors: &[RegionFeature],
        upstream: f64,
    ) -> Result<PieGrads> {
        require_neighbors(neighbors)?;
        let (c, n) = flatten_rows(self.m, center, neighbors)?;
        let mut ws = Workspace::default();
        let mut g = SetGrads::zeros_like(&SetModel::Pie(self.clone()));
        forward_pie(self, &c, &n, &mut ws);
        backward_pie(self, &n, upstream, &mut ws, &mut g);
        Ok(PieGrads {
            phi: g.phi.unwrap(),
            psi: g.psi,
        })
    }

    /// The averaged embedding `mean_j phi(neighbor_j)`.
    pub fn interference(&self, neighbors: &[RegionFeature]) -> Result<Vec<f64>> {
        require_neighbors(neighbors)?;
        let dummy = RegionFeature::new(vec![0.0; self.m], 0.0);
        let (_, n) = flatten_rows(self.m, &dummy, neighbors)?;
        let mut ws = Workspace::default();
        phi_mean(&self.phi, &n, self.m + 1, &mut ws);
        Ok(ws.summary.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PieGrads {
    pub phi: MlpGrads,
    pub psi: MlpGrads,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeanFieldModel {
    pub psi: MlpParams,
    m: usize,
}

impl MeanFieldModel {
    pub fn new(m: usize, arch: Architecture, seed: u64) -> Result<Self> {
        let psi = MlpParams::init(&arch.sizes(2 * (m + 1), 1), sub_seed(seed, 1))?;
        MeanFieldModel::from_parts(m, psi)
    }

    pub fn from_parts(m: usize, psi: MlpParams) -> Result<Self> {
        if psi.input_dim() != 2 * (m + 1) {
            return shape_err(format!("psi input dim {} != 2(M+1) = {}", psi.input_dim(), 2 * (m + 1)));
        }
        if psi.output_dim() != 1 {
            return shape_err("psi must have a scalar output");
        }
        Ok(MeanFieldModel { psi, m })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn forward(&self, center: &RegionFeature, neighbors: &[RegionFeature]) -> Result<f64> {
        require_neighbors(neighbors)?;
        let (c, n) = flatten_rows(self.m, center, neighbors)?;
        let mut ws = Workspace::default();
        Ok(forward_mf(self, &c, &n, &mut ws))
    }

    /// The raw neighbor average `mean_j [X_j, A_j]`.
    pub fn interference(&self, neighbors: &[RegionFeature]) -> Result<Vec<f64>> {
        require_neighbors(neighbors)?;
        let dummy = RegionFeature::new(vec![0.0; self.m], 0.0);
        let (_, n) = flatten_rows(self.m, &dummy, neighbors)?;
        let mut out = vec![0.0; self.m + 1];
        raw_mean(&n, self.m + 1, &mut out);
        Ok(out)
    }

    /// The PIE model with identity `phi` that reproduces this model exactly.
    pub fn to_pie(&self) -> PieModel {
        let d = self.m + 1;
        let eye: Vec<Vec<f64>> = (0..d)
            .map(|r| (0..d).map(|c| if r == c { 1.0 } else { 0.0 }).collect())
            .collect();
        let phi = MlpParams::from_nested(vec![d, d], vec![eye], vec![vec![0.0; d]]).unwrap();
        PieModel::from_parts(self.m, phi, self.psi.clone()).unwrap()
    }
}

/// Partially permutation-invariant network: `psi(mean phi_1(G_1), ..., mean phi_P(G_P))`.
#[derive(Clone, Debug, PartialEq)]
pub struct PpieModel {
    pub groups: Vec<MlpParams>,
    pub psi: MlpParams,
}

impl PpieModel {
    pub fn new(group_dims: &[usize], arch: Architecture, seed: u64) -> Result<Self> {
        let groups = group_dims
            .iter()
            .enumerate()
            .map(|(p, &d)| MlpParams::init(&arch.sizes(d, arch.d_emb), sub_seed(seed, p as u64)))
            .collect::<Result<Vec<_>>>()?;
        let psi = MlpParams::init(
            &arch.sizes(arch.d_emb * group_dims.len(), 1),
            sub_seed(seed, 1_000),
        )?;
        PpieModel::from_parts(groups, psi)
    }

    pub fn from_parts(groups: Vec<MlpParams>, psi: MlpParams) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::InvalidArchitecture("PPIE needs at least one group".into()));
        }
        let total: usize = groups.iter().map(MlpParams::output_dim).sum();
        if psi.input_dim() != total {
            return shape_err(format!("psi input dim {} != total embedding width {total}", psi.input_dim()));
        }
        if psi.output_dim() != 1 {
            return shape_err("psi must have a scalar output");
        }
        Ok(PpieModel { groups, psi })
    }

    pub fn group_dims(&self) -> Vec<usize> {
        self.groups.iter().map(MlpParams::input_dim).collect()
    }

    pub fn forward(&self, groups: &[Vec<Vec<f64>>]) -> Result<f64> {
        if groups.len() != self.groups.len() {
            return shape_err(format!("expected {} groups, got {}", self.groups.len(), groups.len()));
        }
        let mut z = Vec::with_capacity(self.psi.input_dim());
        for (p, (phi, members)) in self.groups.iter().zip(groups).enumerate() {
            if members.is_empty() {
                return Err(Error::DegenerateNeighborhood(format!("group {p} is empty")));
            }
            let mut tape = Tape::new(phi);
            let mut acc = vec![0.0; phi.output_dim()];
            for v in members {
                if v.len() != phi.input_dim() {
                    return shape_err(format!("group {p}: vector length {} != {}", v.len(), phi.input_dim()));
                }
                for (a, o) in acc.iter_mut().zip(phi.forward_tape(v, &mut tape)) {
                    *a += o;
                }
            }
            let k = members.len() as f64;
            z.extend(acc.into_iter().map(|a| a / k));
        }
        Ok(self.psi.forward(&z)?[0])
    }
}

/// Model used by the estimators: either a PIE network or its mean-field baseline.
#[derive(Clone, Debug, PartialEq)]
pub enum SetModel {
    Pie(PieModel),
    MeanField(MeanFieldModel),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    Pie,
    #[serde(alias = "mean-field")]
    Mf,
}

impl std::fmt::Display for ArchKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ArchKind::Pie => "pie",
            ArchKind::Mf => "mf",
        })
    }
}

impl std::str::FromStr for ArchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pie" => Ok(ArchKind::Pie),
            "mf" | "mean-field" => Ok(ArchKind::Mf),
            other => Err(Error::InvalidConfig(format!("unknown architecture '{other}'"))),
        }
    }
}

impl SetModel {
    pub fn new(kind: ArchKind, m: usize, arch: Architecture, seed: u64) -> Result<Self> {
        Ok(match kind {
            ArchKind::Pie => SetModel::Pie(PieModel::new(m, arch, seed)?),
            ArchKind::Mf => SetModel::MeanField(MeanFieldModel::new(m, arch, seed)?),
        })
    }

    pub fn kind(&self) -> ArchKind {
        match self {
            SetModel::Pie(_) => ArchKind::Pie,
            SetModel::MeanField(_) => ArchKind::Mf,
        }
    }

    /// Row width `M + 1`.
    pub fn row_dim(&self) -> usize {
        match self {
            SetModel::Pie(p) => p.m + 1,
            SetModel::MeanField(p) => p.m + 1,
        }
    }

    /// Width of the interference summary.
    pub fn summary_dim(&self) -> usize {
        match self {
            SetModel::Pie(p) => p.d_emb,
            SetModel::MeanField(p) => p.m + 1,
        }
    }

    pub fn psi(&self) -> &MlpParams {
        match self {
            SetModel::Pie(p) => &p.psi,
            SetModel::MeanField(p) => &p.psi,
        }
    }

    pub fn psi_mut(&mut self) -> &mut MlpParams {
        match self {
            SetModel::Pie(p) => &mut p.psi,
            SetModel::MeanField(p) => &mut p.psi,
        }
    }

    /// Forward pass on flat rows. An empty neighbor slice yields a zero
    /// interference term (isolated single-region layouts).
    pub fn forward_rows(&self, center: &[f64], neighbors: &[f64], ws: &mut Workspace) -> f64 {
        match self {
            SetModel::Pie(p) => forward_pie(p, center, neighbors, ws),
            SetModel::MeanField(p) => forward_mf(p, center, neighbors, ws),
        }
    }

    /// Accumulates gradients of `upstream * output` for the most recent
    /// `forward_rows` call made with `ws`.
    pub fn backward_rows(&self, neighbors: &[f64], upstream: f64, ws: &mut Workspace, grads: &mut SetGrads) {
        match self {
            SetModel::Pie(p) => backward_pie(p, neighbors, upstream, ws, grads),
            SetModel::MeanField(p) => {
                let up = [upstream];
                p.psi.backward_tape(ws.psi_tape.as_mut().expect("forward before backward"), &up, &mut grads.psi, None);
            }
        }
    }

    /// Interference summary `m(neighbors)`: the phi-average for PIE, the raw
    /// average for mean-field. Zero vector when there are no neighbors.
    pub fn summary_rows<'w>(&self, neighbors: &[f64], ws: &'w mut Workspace) -> &'w [f64] {
        match self {
            SetModel::Pie(p) => phi_mean(&p.phi, neighbors, p.m + 1, ws),
            SetModel::MeanField(p) => {
                ws.summary.resize(p.m + 1, 0.0);
                raw_mean(neighbors, p.m + 1, &mut ws.summary);
            }
        }
        &ws.summary
    }

    /// The psi input vector `center ++ summary` from the last forward call.
    pub fn last_psi_input<'w>(&self, ws: &'w Workspace) -> &'w [f64] {
        &ws.psi_in
    }

    pub fn n_params(&self) -> usize {
        match self {
            SetModel::Pie(p) => p.phi.n_params() + p.psi.n_params(),
            SetModel::MeanField(p) => p.psi.n_params(),
        }
    }
}

/// Gradient accumulator matching a [`SetModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct SetGrads {
    pub phi: Option<MlpGrads>,
    pub psi: MlpGrads,
}

impl SetGrads {
    pub fn zeros_like(model: &SetModel) -> Self {
        match model {
            SetModel::Pie(p) => SetGrads {
                phi: Some(MlpGrads::zeros_like(&p.phi)),
                psi: MlpGrads::zeros_like(&p.psi),
            },
            SetModel::MeanField(p) => SetGrads {
                phi: None,
                psi: MlpGrads::zeros_like(&p.psi),
            },
        }
    }

    pub fn fill_zero(&mut self) {
        if let Some(g) = &mut self.phi {
            g.fill_zero();
        }
        self.psi.fill_zero();
    }

    pub fn scale(&mut self, c: f64) {
        if let Some(g) = &mut self.phi {
            g.scale(c);
        }
        self.psi.scale(c);
    }
}

/// Adam state for every network inside a [`SetModel`].
#[derive(Clone, Debug)]
pub struct SetAdam {
    phi: Option<AdamState>,
    psi: AdamState,
}

impl SetAdam {
    pub fn new(model: &SetModel, config: AdamConfig) -> Self {
        match model {
            SetModel::Pie(p) => SetAdam {
                phi: Some(AdamState::new(&p.phi, config)),
                psi: AdamState::new(&p.psi, config),
            },
            SetModel::MeanField(p) => SetAdam {
                phi: None,
                psi: AdamState::new(&p.psi, config),
            },
        }
    }

    pub fn update(&mut self, model: &mut SetModel, grads: &SetGrads) -> Result<()> {
        match model {
            SetModel::Pie(p) => {
                let (st, g) = self.phi.as_mut().zip(grads.phi.as_ref()).ok_or_else(|| {
                    Error::Shape("PIE model needs phi gradients and optimizer state".into())
                })?;
                st.update(&mut p.phi, g)?;
                self.psi.update(&mut p.psi, &grads.psi)
            }
            SetModel::MeanField(p) => self.psi.update(&mut p.psi, &grads.psi),
        }
    }
}

/// Reusable scratch buffers for forward/backward passes.
#[derive(Clone, Debug, Default)]
pub struct Workspace {
    phi_tapes: Vec<Tape>,
    psi_tape: Option<Tape>,
    summary: Vec<f64>,
    psi_in: Vec<f64>,
    d_psi_in: Vec<f64>,
    d_emb: Vec<f64>,
}

fn ensure_tape(slot: &mut Option<Tape>, params: &MlpParams) {
    let ok = matches!(slot, Some(t) if t_matches(t, params));
    if !ok {
        *slot = Some(Tape::new(params));
    }
}

fn t_matches(t: &Tape, params: &MlpParams) -> bool {
    t.output().len() == params.output_dim() && t.input_len() == params.input_dim()
}

fn raw_mean(neighbors: &[f64], d: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    let k = neighbors.len() / d;
    if k == 0 {
        return;
    }
    for row in neighbors.chunks_exact(d) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    let kf = k as f64;
    out.iter_mut().for_each(|v| *v /= kf);
}

fn phi_mean(phi: &MlpParams, neighbors: &[f64], d: usize, ws: &mut Workspace) {
    let k = neighbors.len() / d;
    let e = phi.output_dim();
    ws.summary.clear();
    ws.summary.resize(e, 0.0);
    while ws.phi_tapes.len() < k {
        ws.phi_tapes.push(Tape::new(phi));
    }
    for (j, row) in neighbors.chunks_exact(d).enumerate() {
        if !t_matches(&ws.phi_tapes[j], phi) {
            ws.phi_tapes[j] = Tape::new(phi);
        }
        let out = phi.forward_tape(row, &mut ws.phi_tapes[j]);
        for (s, o) in ws.summary.iter_mut().zip(out) {
            *s += o;
        }
    }
    if k > 0 {
        let kf = k as f64;
        ws.summary.iter_mut().for_each(|v| *v /= kf);
    }
}

fn run_psi(psi: &MlpParams, center: &[f64], ws: &mut Workspace) -> f64 {
    ws.psi_in.clear();
    ws.psi_in.extend_from_slice(center);
    ws.psi_in.extend_from_slice(&ws.summary);
    ensure_tape(&mut ws.psi_tape, psi);
    let tape = ws.psi_tape.as_mut().expect("psi tape");
    psi.forward_tape(&ws.psi_in, tape)[0]
}

fn forward_pie(model: &PieModel, center: &[f64], neighbors: &[f64], ws: &mut Workspace) -> f64 {
    phi_mean(&model.phi, neighbors, model.m + 1, ws);
    run_psi(&model.psi, center, ws)
}

fn forward_mf(model: &MeanFieldModel, center: &[f64], neighbors: &[f64], ws: &mut Workspace) -> f64 {
    ws.summary.clear();
    ws.summary.resize(model.m + 1, 0.0);
    raw_mean(neighbors, model.m + 1, &mut ws.summary);
    run_psi(&model.psi, center, ws)
}

fn backward_pie(model: &PieModel, neighbors: &[f64], upstream: f64, ws: &mut Workspace, grads: &mut SetGrads) {
    let d = model.m + 1;
    ws.d_psi_in.clear();
    ws.d_psi_in.resize(model.psi.input_dim(), 0.0);
    let up = [upstream];
    model
        .psi
        .backward_tape(ws.psi_tape.as_mut().expect("forward before backward"), &up, &mut grads.psi, Some(&mut ws.d_psi_in));
    let k = neighbors.len() / d;
    if k == 0 {
        return;
    }
    let scale = 1.0 / k as f64;
    ws.d_emb.clear();
    ws.d_emb.extend(ws.d_psi_in[d..].iter().map(|v| v * scale));
    let gphi = grads.phi.as_mut().expect("PIE gradients carry phi");
    for j in 0..k {
        model.phi.backward_tape(&mut ws.phi_tapes[j], &ws.d_emb, gphi, None);
    }
}

/// Serialized model document, tagged by `kind`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelDoc {
    Pie {
        #[serde(rename = "M")]
        m: usize,
        d_emb: usize,
        phi: MlpParams,
        psi: MlpParams,
    },
    Mf {
        #[serde(rename = "M")]
        m: usize,
        d_emb: usize,
        psi: MlpParams,
    },
    Ppie {
        #[serde(rename = "M")]
        m: usize,
        d_emb: usize,
        phi: Vec<MlpParams>,
        psi: MlpParams,
    },
}

/// Any of the three model families.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyModel {
    Set(SetModel),
    Ppie(PpieModel),
}

impl From<&AnyModel> for ModelDoc {
    fn from(m: &AnyModel) -> Self {
        match m {
            AnyModel::Set(SetModel::Pie(p)) => ModelDoc::Pie {
                m: p.m,
                d_emb: p.d_emb,
                phi: p.phi.clone(),
                psi: p.psi.clone(),
            },
            AnyModel::Set(SetModel::MeanField(p)) => ModelDoc::Mf {
                m: p.m,
                d_emb: p.m + 1,
                psi: p.psi.clone(),
            },
            AnyModel::Ppie(p) => ModelDoc::Ppie {
                m: p.groups[0].input_dim().saturating_sub(1),
                d_emb: p.groups[0].output_dim(),
                phi: p.groups.clone(),
                psi: p.psi.clone(),
            },
        }
    }
}

impl TryFrom<ModelDoc> for AnyModel {
    type Error = Error;

    fn try_from(doc: ModelDoc) -> Result<Self> {
        Ok(match doc {
            ModelDoc::Pie { m, d_emb, phi, psi } => {
                let p = PieModel::from_parts(m, phi, psi)?;
                if p.d_emb != d_emb {
                    return shape_err(format!("d_emb {d_emb} does not match phi output {}", p.d_emb));
                }
                AnyModel::Set(SetModel::Pie(p))
            }
            ModelDoc::Mf { m, psi, .. } => AnyModel::Set(SetModel::MeanField(MeanFieldModel::from_parts(m, psi)?)),
            ModelDoc::Ppie { phi, psi, .. } => AnyModel::Ppie(PpieModel::from_parts(phi, psi)?),
        })
    }
}

impl AnyModel {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&ModelDoc::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: ModelDoc = serde_json::from_str(s)?;
        AnyModel::try_from(doc)
    }
}
