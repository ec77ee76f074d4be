use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use planet_core::evallab::{alignment_report, fewshot_eval, synergy_experiment, FewShotTask, SynergyConfig};
use planet_core::gradcheck::{check_model, jitter_biases, Tolerance};
use planet_core::magdata::{
    apply_mask, gen_sbm_mag, gen_synergy_mag, load_graph, sample_ego_batch, save_graph, EgoConfig, MaskConfig, Modality,
    MultimodalGraph, SbmSpec, SynergyMode, SynergySpec,
};
use planet_core::model::{ModelConfig, PlanetModel};
use planet_core::numerics::checkpoint::write_bundle;
use planet_core::numerics::Seed;
use planet_core::objective::LossWeights;
use planet_core::trainer::{
    embed, embed_chunked, graph_hash, link_prediction_probe, load_checkpoint, node_classification_probe, pretrain, sha256_hex,
    write_run, Checkpoint, ProbeConfig, TrainConfig,
};

use crate::config::load;
use crate::{CliError, Command, Common, GraphKind, Inputs, ProbeTask};

pub fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Synth { common, kind } => synth(&common, kind),
        Command::Pretrain { common, graphs } => pretrain_cmd(&common, &graphs),
        Command::Embed { common, inputs } => embed_cmd(&common, &inputs),
        Command::Probe { common, inputs, task } => probe(&common, &inputs, task),
        Command::Fewshot { common, inputs } => fewshot(&common, &inputs),
        Command::AlignReport { common, inputs } => align(&common, &inputs),
        Command::Synergy { common } => synergy(&common),
        Command::Gradcheck { common } => gradcheck(&common),
    }
}

fn out_dir(common: &Common) -> Result<&Path, CliError> {
    std::fs::create_dir_all(&common.out).map_err(|e| CliError::Data(format!("{}: {e}", common.out.display())))?;
    Ok(&common.out)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("reports serialize");
    std::fs::write(path, text + "\n").map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn read_graph(path: &Path) -> Result<MultimodalGraph, CliError> {
    Ok(load_graph(path)?)
}

fn file_hash(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

/// Hash, checkpoint and graph for the commands that read a trained model.
struct Loaded {
    checkpoint: Checkpoint,
    checkpoint_sha256: String,
    graph: MultimodalGraph,
    graph_sha256: String,
}

fn load_inputs(inputs: &Inputs) -> Result<Loaded, CliError> {
    let checkpoint = load_checkpoint(&inputs.checkpoint)?;
    let checkpoint_sha256 = file_hash(&inputs.checkpoint)?;
    let path = inputs.graph.as_ref().ok_or_else(|| CliError::Config("--graph is required".into()))?;
    let graph = read_graph(path)?;
    checkpoint.model.check_schema(&graph)?;
    let graph_sha256 = graph_hash(&graph);
    Ok(Loaded { checkpoint, checkpoint_sha256, graph, graph_sha256 })
}

#[derive(Serialize)]
struct Report<'a, T: Serialize> {
    command: &'a str,
    seed: u64,
    config_text: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    checkpoint_sha256: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    graph_sha256: Option<&'a str>,
    #[serde(flatten)]
    body: T,
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SbmFile {
    block_sizes: Vec<usize>,
    p_in: f64,
    p_out: f64,
    /// `name:dim` per modality.
    modalities: Vec<String>,
    anchor: usize,
    mean_scale: f64,
    sigma: f64,
}

impl Default for SbmFile {
    fn default() -> Self {
        let s = SbmSpec::default();
        Self {
            block_sizes: s.block_sizes,
            p_in: s.p_in,
            p_out: s.p_out,
            modalities: s.modalities.iter().map(|m| format!("{}:{}", m.name, m.dim)).collect(),
            anchor: s.anchor,
            mean_scale: s.mean_scale,
            sigma: s.sigma,
        }
    }
}

fn parse_modality(s: &str) -> Result<Modality, CliError> {
    let (name, dim) = s.split_once(':').ok_or_else(|| CliError::Config(format!("modality {s}: expected name:dim")))?;
    let dim = dim.parse().map_err(|_| CliError::Config(format!("modality {s}: bad dimension")))?;
    Ok(Modality::new(name, dim))
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SynergyDataFile {
    num_nodes: usize,
    edge_prob: f64,
    sigma: f64,
    unique_dims: (usize, usize),
    mode: SynergyMode,
}

impl Default for SynergyDataFile {
    fn default() -> Self {
        let s = SynergyConfig::default().data;
        Self { num_nodes: s.num_nodes, edge_prob: s.edge_prob, sigma: s.sigma, unique_dims: s.unique_dims, mode: s.mode }
    }
}

impl SynergyDataFile {
    fn spec(&self) -> SynergySpec {
        SynergySpec {
            num_nodes: self.num_nodes,
            edge_prob: self.edge_prob,
            sigma: self.sigma,
            unique_dims: self.unique_dims,
            mode: self.mode,
        }
    }
}

fn synth(common: &Common, kind: GraphKind) -> Result<(), CliError> {
    let (g, text) = match kind {
        GraphKind::Sbm => {
            let (f, text): (SbmFile, _) = load(common.config.as_deref(), &common.set)?;
            let spec = SbmSpec {
                block_sizes: f.block_sizes,
                p_in: f.p_in,
                p_out: f.p_out,
                modalities: f.modalities.iter().map(|m| parse_modality(m)).collect::<Result<_, _>>()?,
                anchor: f.anchor,
                mean_scale: f.mean_scale,
                sigma: f.sigma,
            };
            (gen_sbm_mag(&spec, Seed(common.seed)).map_err(data_as_config)?, text)
        }
        GraphKind::Synergy => {
            let (f, text): (SynergyDataFile, _) = load(common.config.as_deref(), &common.set)?;
            (gen_synergy_mag(&f.spec(), Seed(common.seed)).map_err(data_as_config)?, text)
        }
    };
    let dir = out_dir(common)?;
    save_graph(&g, &dir.join("graph.mag"))?;
    #[derive(Serialize)]
    struct Body {
        nodes: usize,
        edges: usize,
        modalities: Vec<Modality>,
        graph_file: &'static str,
    }
    let hash = graph_hash(&g);
    let body = Body { nodes: g.num_nodes(), edges: g.num_edges(), modalities: g.modalities().to_vec(), graph_file: "graph.mag" };
    write_json(
        &dir.join("manifest.json"),
        &Report { command: "synth", seed: common.seed, config_text: &text, checkpoint_sha256: None, graph_sha256: Some(&hash), body },
    )
}

/// Generator parameter errors come from the config, not from input data.
fn data_as_config(e: planet_core::magdata::DataError) -> CliError {
    CliError::Config(e.to_string())
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PretrainFile {
    dim: usize,
    heads: usize,
    num_layers: usize,
    num_experts: usize,
    k_top: usize,
    codebook_size: usize,
    tau: f64,
    gamma: f64,
    dropout: f64,
    use_edg: bool,
    masked_only_recon: bool,
    epochs: usize,
    steps_per_epoch: usize,
    batch_size: usize,
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    beta3: f64,
    beta4: f64,
    beta5: f64,
    beta_inter: f64,
    node_mask_p: f64,
    modality_mask_p: f64,
    dim_mask_p: f64,
    hops: usize,
    edge_holdout_p: f64,
    dataset_weights: Vec<f64>,
    log_every: usize,
    codebook_init: bool,
}

impl Default for PretrainFile {
    fn default() -> Self {
        let m = ModelConfig::desk(Vec::new(), 0);
        let t = TrainConfig::desk();
        Self {
            dim: m.dim,
            heads: m.heads,
            num_layers: m.num_layers,
            num_experts: m.num_experts,
            k_top: m.k_top,
            codebook_size: m.codebook_size,
            tau: m.tau,
            gamma: m.gamma,
            dropout: m.dropout,
            use_edg: m.use_edg,
            masked_only_recon: m.masked_only_recon,
            epochs: t.epochs,
            steps_per_epoch: t.steps_per_epoch,
            batch_size: t.batch_size,
            lr: t.lr,
            weight_decay: t.weight_decay,
            beta1: t.weights.beta1,
            beta2: t.weights.beta2,
            beta3: t.weights.beta3,
            beta4: t.weights.beta4,
            beta5: t.weights.beta5,
            beta_inter: t.weights.beta_inter,
            node_mask_p: t.mask.node_p,
            modality_mask_p: t.mask.modality_p,
            dim_mask_p: t.mask.dim_p,
            hops: t.ego.hops,
            edge_holdout_p: t.ego.edge_holdout_p,
            dataset_weights: t.dataset_weights,
            log_every: t.log_every,
            codebook_init: t.codebook_init,
        }
    }
}

impl PretrainFile {
    fn configs(&self, g: &MultimodalGraph, seed: u64) -> (ModelConfig, TrainConfig) {
        let model = ModelConfig {
            dim: self.dim,
            heads: self.heads,
            num_layers: self.num_layers,
            num_experts: self.num_experts,
            k_top: self.k_top,
            codebook_size: self.codebook_size,
            tau: self.tau,
            gamma: self.gamma,
            dropout: self.dropout,
            use_edg: self.use_edg,
            masked_only_recon: self.masked_only_recon,
            ..ModelConfig::desk(g.modalities().to_vec(), g.anchor())
        };
        let train = TrainConfig {
            epochs: self.epochs,
            steps_per_epoch: self.steps_per_epoch,
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: self.weight_decay,
            weights: LossWeights {
                beta1: self.beta1,
                beta2: self.beta2,
                beta3: self.beta3,
                beta4: self.beta4,
                beta5: self.beta5,
                beta_inter: self.beta_inter,
            },
            mask: MaskConfig { node_p: self.node_mask_p, modality_p: self.modality_mask_p, dim_p: self.dim_mask_p },
            ego: EgoConfig { hops: self.hops, edge_holdout_p: self.edge_holdout_p, sample_negatives: true },
            dataset_weights: self.dataset_weights.clone(),
            seed,
            log_every: self.log_every,
            codebook_init: self.codebook_init,
        };
        (model, train)
    }
}

fn pretrain_cmd(common: &Common, paths: &[PathBuf]) -> Result<(), CliError> {
    let (f, text): (PretrainFile, _) = load(common.config.as_deref(), &common.set)?;
    let graphs = paths.iter().map(|p| read_graph(p)).collect::<Result<Vec<_>, _>>()?;
    let (model_cfg, train_cfg) = f.configs(&graphs[0], common.seed);
    train_cfg.validate(graphs.len())?;
    let model = PlanetModel::new(model_cfg, Seed(common.seed))?;
    let refs: Vec<&MultimodalGraph> = graphs.iter().collect();
    for g in &refs {
        model.check_schema(g)?;
    }
    let outcome = pretrain(&refs, model, &train_cfg)?;
    let dir = out_dir(common)?;
    write_run(dir, &outcome, &train_cfg, &refs, Some(text))?;
    Ok(())
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EmbedFile {
    /// Centers per ego-subgraph pass; 0 runs the whole graph at once.
    chunk: usize,
    /// Ego radius for chunked passes; 0 means the model depth.
    hops: usize,
}

fn embed_cmd(common: &Common, inputs: &Inputs) -> Result<(), CliError> {
    let (f, text): (EmbedFile, _) = load(common.config.as_deref(), &common.set)?;
    let l = load_inputs(inputs)?;
    let model = &l.checkpoint.model;
    let emb = if f.chunk == 0 {
        embed(model, &l.graph)?
    } else {
        let hops = if f.hops == 0 { model.config.num_layers } else { f.hops };
        embed_chunked(model, &l.graph, f.chunk, hops)?
    };
    let dir = out_dir(common)?;
    let path = dir.join("embeddings.plnt");
    let mut bytes = Vec::new();
    write_bundle(&mut bytes, &[("embeddings".to_string(), emb.clone())]).expect("writing to memory");
    std::fs::write(&path, &bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    #[derive(Serialize)]
    struct Body {
        rows: usize,
        cols: usize,
        embeddings_file: &'static str,
        embeddings_sha256: String,
    }
    let body = Body { rows: emb.rows(), cols: emb.cols(), embeddings_file: "embeddings.plnt", embeddings_sha256: sha256_hex(&bytes) };
    write_json(
        &dir.join("embed.json"),
        &Report {
            command: "embed",
            seed: common.seed,
            config_text: &text,
            checkpoint_sha256: Some(&l.checkpoint_sha256),
            graph_sha256: Some(&l.graph_sha256),
            body,
        },
    )
}

fn probe(common: &Common, inputs: &Inputs, task: ProbeTask) -> Result<(), CliError> {
    let (cfg, text): (ProbeConfig, _) = load(common.config.as_deref(), &common.set)?;
    let cfg = ProbeConfig { seed: common.seed, ..cfg };
    let l = load_inputs(inputs)?;
    let emb = embed(&l.checkpoint.model, &l.graph)?;
    let body = match task {
        ProbeTask::Node => serde_json::to_value(node_classification_probe(&emb, &l.graph, &cfg)?),
        ProbeTask::Link => serde_json::to_value(link_prediction_probe(&emb, &l.graph, &cfg)?),
    }
    .expect("reports serialize");
    #[derive(Serialize)]
    struct Body {
        task: ProbeTask,
        probe: ProbeConfig,
        report: serde_json::Value,
    }
    write_json(
        &out_dir(common)?.join("probe.json"),
        &Report {
            command: "probe",
            seed: common.seed,
            config_text: &text,
            checkpoint_sha256: Some(&l.checkpoint_sha256),
            graph_sha256: Some(&l.graph_sha256),
            body: Body { task, probe: cfg, report: body },
        },
    )
}

fn fewshot(common: &Common, inputs: &Inputs) -> Result<(), CliError> {
    let (task, text): (FewShotTask, _) = load(common.config.as_deref(), &common.set)?;
    let task = FewShotTask { seed: common.seed, ..task };
    let l = load_inputs(inputs)?;
    let labels = l.graph.labels().ok_or_else(|| CliError::Data("graph has no node labels".into()))?;
    let emb = embed(&l.checkpoint.model, &l.graph)?;
    let result = fewshot_eval(&emb, &labels.values, &task)?;
    #[derive(Serialize)]
    struct Body {
        task: FewShotTask,
        result: planet_core::evallab::FewShotResult,
    }
    write_json(
        &out_dir(common)?.join("fewshot.json"),
        &Report {
            command: "fewshot",
            seed: common.seed,
            config_text: &text,
            checkpoint_sha256: Some(&l.checkpoint_sha256),
            graph_sha256: Some(&l.graph_sha256),
            body: Body { task, result },
        },
    )
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct NoKeys {}

fn align(common: &Common, inputs: &Inputs) -> Result<(), CliError> {
    let (_, text): (NoKeys, _) = load(common.config.as_deref(), &common.set)?;
    let l = load_inputs(inputs)?;
    let report = alignment_report(&l.checkpoint.model, &l.graph)?;
    write_json(
        &out_dir(common)?.join("align_report.json"),
        &Report {
            command: "align-report",
            seed: common.seed,
            config_text: &text,
            checkpoint_sha256: Some(&l.checkpoint_sha256),
            graph_sha256: Some(&l.graph_sha256),
            body: report,
        },
    )
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SynergyFile {
    num_nodes: usize,
    edge_prob: f64,
    sigma: f64,
    unique_dims: (usize, usize),
    epochs: usize,
    steps_per_epoch: usize,
    batch_size: usize,
    lr: f64,
    probe_epochs: usize,
    max_vanilla: f64,
    min_edg: f64,
    min_gap: f64,
}

impl Default for SynergyFile {
    fn default() -> Self {
        let c = SynergyConfig::default();
        Self {
            num_nodes: c.data.num_nodes,
            edge_prob: c.data.edge_prob,
            sigma: c.data.sigma,
            unique_dims: c.data.unique_dims,
            epochs: c.train.epochs,
            steps_per_epoch: c.train.steps_per_epoch,
            batch_size: c.train.batch_size,
            lr: c.train.lr,
            probe_epochs: c.probe.epochs,
            max_vanilla: c.max_vanilla,
            min_edg: c.min_edg,
            min_gap: c.min_gap,
        }
    }
}

fn synergy(common: &Common) -> Result<(), CliError> {
    let (f, text): (SynergyFile, _) = load(common.config.as_deref(), &common.set)?;
    let base = SynergyConfig::default();
    let cfg = SynergyConfig {
        data: SynergySpec { num_nodes: f.num_nodes, edge_prob: f.edge_prob, sigma: f.sigma, unique_dims: f.unique_dims, ..base.data },
        train: TrainConfig { epochs: f.epochs, steps_per_epoch: f.steps_per_epoch, batch_size: f.batch_size, lr: f.lr, ..base.train },
        probe: ProbeConfig { epochs: f.probe_epochs, ..base.probe },
        max_vanilla: f.max_vanilla,
        min_edg: f.min_edg,
        min_gap: f.min_gap,
    };
    cfg.train.validate(1)?;
    let r = synergy_experiment(common.seed, &cfg)?;
    #[derive(Serialize)]
    struct Body {
        config: SynergyConfig,
        acc_vanilla: f64,
        acc_edg: f64,
        gap: f64,
        vanilla_within_bound: bool,
        edg_within_bound: bool,
        gap_within_bound: bool,
        pass: bool,
        details: planet_core::evallab::SynergyReport,
    }
    let gap = r.acc_edg - r.acc_vanilla;
    let body = Body {
        acc_vanilla: r.acc_vanilla,
        acc_edg: r.acc_edg,
        gap,
        vanilla_within_bound: r.acc_vanilla <= cfg.max_vanilla,
        edg_within_bound: r.acc_edg >= cfg.min_edg,
        gap_within_bound: gap >= cfg.min_gap,
        pass: r.pass,
        details: r,
        config: cfg,
    };
    write_json(
        &out_dir(common)?.join("report.json"),
        &Report { command: "synergy", seed: common.seed, config_text: &text, checkpoint_sha256: None, graph_sha256: None, body },
    )
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GradcheckFile {
    nodes: usize,
    rel: f64,
    abs: f64,
    step: f64,
}

impl Default for GradcheckFile {
    fn default() -> Self {
        let t = Tolerance::default();
        Self { nodes: 12, rel: t.rel, abs: t.abs, step: t.step }
    }
}

fn gradcheck(common: &Common) -> Result<(), CliError> {
    let (f, text): (GradcheckFile, _) = load(common.config.as_deref(), &common.set)?;
    if f.nodes < 2 {
        return Err(CliError::Config(format!("gradcheck needs at least 2 nodes, got {}", f.nodes)));
    }
    let spec = SbmSpec {
        block_sizes: vec![f.nodes / 2, f.nodes - f.nodes / 2],
        p_in: 0.5,
        p_out: 0.1,
        modalities: vec![Modality::new("text", 5), Modality::new("image", 4)],
        ..Default::default()
    };
    let seed = Seed(common.seed);
    let g = gen_sbm_mag(&spec, seed.child("graph", 0))?;
    let mut model = PlanetModel::new(ModelConfig::desk(g.modalities().to_vec(), 0), seed.child("model", 0))?;
    jitter_biases(&mut model.store, seed.child("bias", 0));
    let centers: Vec<usize> = (0..g.num_nodes()).collect();
    let b = sample_ego_batch(&g, &centers, &EgoConfig::default(), seed.child("batch", 0))?;
    let (plan, masked) = apply_mask(&b.features, &MaskConfig::default(), seed.child("mask", 0))?;
    model.init_codebook(&b.features, &b.message_edges)?;
    let tol = Tolerance { rel: f.rel, abs: f.abs, step: f.step };
    let r = check_model(&model, &b, &masked, &plan, &LossWeights::default(), tol)?;
    #[derive(Serialize)]
    struct Body {
        params: usize,
        entries: usize,
        max_abs_err: f64,
        max_rel_err: f64,
        mismatches: usize,
        /// Mismatch count per parameter.
        mismatched_params: std::collections::BTreeMap<String, usize>,
        passed: bool,
    }
    let mut mismatched_params = std::collections::BTreeMap::new();
    for m in &r.mismatches {
        *mismatched_params.entry(m.param.clone()).or_insert(0) += 1;
    }
    let body =
        Body { params: r.params, entries: r.entries, max_abs_err: r.max_abs_err, max_rel_err: r.max_rel_err, mismatches: r.mismatches.len(), mismatched_params, passed: r.passed() };
    write_json(
        &out_dir(common)?.join("gradcheck.json"),
        &Report { command: "gradcheck", seed: common.seed, config_text: &text, checkpoint_sha256: None, graph_sha256: None, body },
    )?;
    if r.passed() {
        Ok(())
    } else {
        Err(CliError::Numeric(format!("{} of {} gradient entries disagree with finite differences", r.mismatches.len(), r.entries)))
    }
}
