//! The experiment stages. Each stage reads its inputs from the run
//! directory (so that standalone commands and `reproduce` see identical,
//! f32-rounded tensors) and writes artifacts plus a metrics JSON file.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::{GammaSelection, RunConfig};
use super::manifest::RunDir;
use crate::corpus::{generate_corpus, split_edits, Corpus, EditRequest, SplitMode};
use crate::editor::{
    estimate_key_covariance, memit_edit, rome_edit, success_record, EditContext, EditedLayerWeights, KeyCovariance,
    Ridge,
};
use crate::error::{Error, Result};
use crate::evaluator::{
    kl_pair, records_csv, rsr, signal_stats, summarize_kl, KlPairs, PerplexityTriple, ReversalRecord, SignalStats,
};
use crate::interventions::{
    activation_stats, blocking_report, mask_reversals, pct_to_reach, sweep, sweep_csv, BlockingReport,
    PruneCriterion, PruneMode, SweepPoint,
};
use crate::lens::{
    activation_heatmap, compare_traces, curve_distance, decompose_set, delta_magnitude_stats, dimension_trajectories,
    downstream_attention, edited_layer_amplification, grid_csv, mask_structure, trajectories_csv, Amplification,
    Convention, MaskStructure, ModelSet, TraceQuery,
};
use crate::maskforge::{
    build_samples, gamma_sweep, masked_matrix, select_gamma, train_shared_mask, BinaryMask, GammaPoint,
    TrainingLogRow,
};
use crate::nanomodel::{pretrain, CurvePoint, TransformerModel};

pub const CORPUS: &str = "corpus/corpus.json";
pub const MODEL: &str = "checkpoints/model.bin";
pub const REQUESTS: &str = "edits/rome/requests.json";
pub const MASK_STATE: &str = "masks/mask_state.bin";
pub const MASK: &str = "masks/mask.bin";
pub const DISJOINT_MASK: &str = "masks/disjoint_mask.bin";

fn edit_path(id: &str) -> String {
    format!("edits/rome/{id}.bin")
}

/// Edit requests of every group used by the experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRequests {
    pub train: Vec<EditRequest>,
    pub test: Vec<EditRequest>,
    pub disjoint_train: Vec<EditRequest>,
    pub disjoint_test: Vec<EditRequest>,
}

impl EditRequests {
    fn groups(&self) -> [(&'static str, &Vec<EditRequest>); 4] {
        [
            ("train", &self.train),
            ("test", &self.test),
            ("disjoint_train", &self.disjoint_train),
            ("disjoint_test", &self.disjoint_test),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct EditSet {
    pub requests: EditRequests,
    pub weights: BTreeMap<String, EditedLayerWeights>,
}

impl EditSet {
    pub fn weights_for(&self, reqs: &[EditRequest]) -> Vec<EditedLayerWeights> {
        reqs.iter().map(|r| self.weights[&r.edit_id()].clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusMetrics {
    pub facts: usize,
    pub vocab_size: usize,
    pub templates: Vec<String>,
    pub neutral_train_tokens: usize,
    pub neutral_eval_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainMetrics {
    pub recall: f64,
    pub final_loss: f64,
    pub neutral_perplexity: f64,
    pub curve: Vec<CurvePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RomeRow {
    pub group: String,
    pub edit_id: String,
    pub success: bool,
    pub p_new: f64,
    pub p_old: f64,
    pub achieved_p: f64,
    pub value_steps: usize,
    pub identity_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RomeMetrics {
    pub layer: usize,
    pub covariance_lambda: f64,
    pub success_by_group: BTreeMap<String, f64>,
    pub edits: Vec<RomeRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemitMetrics {
    pub layers: Vec<usize>,
    pub success: f64,
    pub per_request: Vec<crate::editor::SuccessRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSummary {
    pub gamma: f64,
    pub gamma_selection: GammaSelection,
    pub pruned_fraction: f64,
    pub checksum: String,
    pub sweep: Vec<GammaPoint>,
    pub final_log: Option<TrainingLogRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskMetrics {
    pub layer: usize,
    pub shared: MaskSummary,
    pub disjoint: Option<MaskSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub train_rsr: f64,
    pub test_rsr: f64,
    pub disjoint_test_rsr: Option<f64>,
    pub top1_overlap_train: f64,
    /// `ppl_me` and `ppl_mp` are means over the single-edit training models.
    pub perplexity: PerplexityTriple,
    pub ppl_mp_le_me_edits: usize,
    pub kl: KlPairs,
    /// Original model on original facts versus edited models on edited facts.
    pub signal: SignalStats,
    pub train_records: Vec<ReversalRecord>,
    pub test_records: Vec<ReversalRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionToTarget {
    pub original: f64,
    pub edited: f64,
    pub pruned: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecomposeMetrics {
    pub layer: usize,
    pub amplification: Amplification,
    /// Mean summed attention contribution to `o*` above the edited layer.
    pub downstream_attention_o_star: AttentionToTarget,
    pub max_residue_raw: f64,
    pub max_residue_frozen: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskAnalysis {
    pub structure: MaskStructure,
    pub mean_abs_delta: f64,
    pub masked_mean_abs_delta: Option<f64>,
    pub top_delta_overlap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMetrics {
    pub dims: Vec<usize>,
    /// L2 distance of the top-1 dimension's mean curve to the original's.
    pub top1_distance_edited: f64,
    pub top1_distance_pruned: f64,
    /// Mean Frobenius distance of heatmaps to the original's.
    pub heatmap_distance_edited: f64,
    pub heatmap_distance_pruned: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepMetrics {
    pub points: Vec<SweepPoint>,
    /// Smallest pct reaching RSR 0.5 per criterion in original mode.
    pub pct_for_half_rsr: BTreeMap<String, Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub recall: f64,
    pub rome_train_success: f64,
    pub memit_success: f64,
    pub mask_gamma: f64,
    pub mask_pruned_fraction: f64,
    pub mask_checksum: String,
    pub train_rsr: f64,
    pub test_rsr: f64,
    pub disjoint_test_rsr: Option<f64>,
    pub perplexity: PerplexityTriple,
    pub amplification_ratio: f64,
    pub blocking_standard: f64,
    pub blocking_blocked: f64,
}

pub struct Pipeline {
    pub cfg: RunConfig,
    pub dir: RunDir,
    pub quiet: bool,
    corpus: Option<Corpus>,
    model: Option<TransformerModel>,
    edits: Option<EditSet>,
    masks: BTreeMap<&'static str, BinaryMask>,
}

impl Pipeline {
    pub fn new(cfg: RunConfig, dir: RunDir, quiet: bool) -> Self {
        Self {
            cfg,
            dir,
            quiet,
            corpus: None,
            model: None,
            edits: None,
            masks: BTreeMap::new(),
        }
    }

    fn say(&self, msg: &str) {
        if !self.quiet {
            eprintln!("[editlab] {msg}");
        }
    }

    fn require(&self, rel: &str, producer: &str) -> Result<std::path::PathBuf> {
        let p = self.dir.path(rel);
        if !p.exists() {
            return Err(Error::InvalidArgument(format!(
                "{} not found; run `{producer}` first with the same --out",
                p.display()
            )));
        }
        Ok(p)
    }

    pub fn corpus(&mut self) -> Result<&Corpus> {
        if self.corpus.is_none() {
            let p = self.require(CORPUS, "gen-corpus")?;
            self.corpus = Some(Corpus::load(&p)?);
            self.dir.note_input(CORPUS);
        }
        Ok(self.corpus.as_ref().expect("loaded"))
    }

    pub fn model(&mut self) -> Result<&TransformerModel> {
        if self.model.is_none() {
            let p = self.require(MODEL, "pretrain")?;
            self.model = Some(TransformerModel::load(&p)?);
            self.dir.note_input(MODEL);
        }
        Ok(self.model.as_ref().expect("loaded"))
    }

    pub fn edits(&mut self) -> Result<&EditSet> {
        if self.edits.is_none() {
            let p = self.require(REQUESTS, "edit rome")?;
            let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
            let requests: EditRequests = serde_json::from_slice(&bytes)?;
            self.dir.note_input(REQUESTS);
            let mut weights = BTreeMap::new();
            for (_, reqs) in requests.groups() {
                for r in reqs {
                    let rel = edit_path(&r.edit_id());
                    weights.insert(r.edit_id(), EditedLayerWeights::load(&self.require(&rel, "edit rome")?)?);
                    self.dir.note_input(&rel);
                }
            }
            self.edits = Some(EditSet { requests, weights });
        }
        Ok(self.edits.as_ref().expect("loaded"))
    }

    pub fn mask(&mut self, rel: &'static str) -> Result<&BinaryMask> {
        if !self.masks.contains_key(rel) {
            let p = self.require(rel, "train-mask")?;
            self.masks.insert(rel, BinaryMask::load(&p)?);
            self.dir.note_input(rel);
        }
        Ok(&self.masks[rel])
    }

    fn covariance(&mut self, layer: usize) -> Result<KeyCovariance> {
        let n = self.cfg.editor.covariance_tokens;
        let ridge = Ridge::MeanDiagonal(self.cfg.editor.ridge_scale);
        let corpus = self.corpus()?.clone();
        let text = &corpus.neutral_train[..n.min(corpus.neutral_train.len())];
        estimate_key_covariance(self.model()?, layer, text, ridge)
    }

    pub fn gen_corpus(&mut self) -> Result<CorpusMetrics> {
        self.say("generating corpus");
        let corpus = generate_corpus(&self.cfg.corpus)?;
        let files = corpus.export(&self.dir.path("corpus"))?;
        for f in files {
            let name = f.file_name().expect("file").to_string_lossy().to_string();
            self.dir.track(&format!("corpus/{name}"));
        }
        let m = CorpusMetrics {
            facts: corpus.facts.len(),
            vocab_size: corpus.vocab.len(),
            templates: corpus.templates.clone(),
            neutral_train_tokens: corpus.neutral_train.len(),
            neutral_eval_tokens: corpus.neutral_eval.len(),
        };
        self.dir.write_json("metrics/corpus.json", &m)?;
        self.corpus = Some(corpus);
        Ok(m)
    }

    pub fn pretrain(&mut self) -> Result<PretrainMetrics> {
        self.say("pretraining");
        let corpus = self.corpus()?.clone();
        let init = TransformerModel::new(self.cfg.model.clone())?;
        let (model, report) = pretrain(init, &corpus, &self.cfg.pretrain)?;
        let path = self.dir.prepare(MODEL)?;
        model.save(&path)?;
        self.dir.track(MODEL);
        let text = self.ppl_text(&corpus);
        let m = PretrainMetrics {
            recall: report.recall.recall,
            final_loss: report.curve.last().map(|c| c.loss).unwrap_or(f64::NAN),
            neutral_perplexity: model.perplexity(text)?,
            curve: report.curve,
        };
        self.dir.write_json("metrics/pretrain.json", &m)?;
        self.model = Some(TransformerModel::load(&path)?);
        Ok(m)
    }

    fn ppl_text<'c>(&self, corpus: &'c Corpus) -> &'c [usize] {
        let n = self.cfg.experiment.ppl_tokens.min(corpus.neutral_eval.len());
        &corpus.neutral_eval[..n]
    }

    fn split(&mut self) -> Result<EditRequests> {
        let exp = self.cfg.experiment.clone();
        let seed = self.cfg.seed;
        let corpus = self.corpus()?;
        let (train, test) = split_edits(corpus, exp.n_train_edits, exp.n_test_edits, exp.split_mode, seed)?;
        let (disjoint_train, disjoint_test) = if exp.n_disjoint_test_edits > 0 {
            split_edits(
                corpus,
                exp.n_train_edits,
                exp.n_disjoint_test_edits,
                SplitMode::RelationDisjoint,
                seed.wrapping_add(1),
            )?
        } else {
            (Vec::new(), Vec::new())
        };
        // Keep edit ids unique across groups.
        let mut all = [train, test, disjoint_train, disjoint_test];
        let mut next = 0;
        for group in all.iter_mut() {
            for r in group.iter_mut() {
                r.case_id = next;
                next += 1;
            }
        }
        let [train, test, disjoint_train, disjoint_test] = all;
        Ok(EditRequests {
            train,
            test,
            disjoint_train,
            disjoint_test,
        })
    }

    pub fn edit_rome(&mut self) -> Result<RomeMetrics> {
        let layer = self.cfg.editor.rome_layer;
        let n_layers = self.model()?.config.n_layers;
        self.cfg.editor.validate(n_layers)?;
        let requests = self.split()?;
        let cov = self.covariance(layer)?;
        let corpus = self.corpus()?.clone();
        let model = self.model()?.clone();
        let ctx = EditContext {
            vocab: &corpus.vocab,
            templates: &corpus.templates,
        };
        let mut rows = Vec::new();
        let mut by_group = BTreeMap::new();
        for (group, reqs) in requests.groups() {
            if reqs.is_empty() {
                continue;
            }
            self.say(&format!("rome: {} edits ({group})", reqs.len()));
            let mut ok = 0;
            for r in reqs {
                let e = rome_edit(&model, r, &cov, ctx, &self.cfg.editor.value)?;
                let rel = edit_path(&r.edit_id());
                let path = self.dir.prepare(&rel)?;
                e.weights.save(&path)?;
                self.dir.track(&rel);
                self.dir.track(&rel.replace(".bin", ".json"));
                let s = success_record(&e.model, r, &corpus.vocab)?;
                ok += usize::from(s.success);
                rows.push(RomeRow {
                    group: group.to_string(),
                    edit_id: s.edit_id,
                    success: s.success,
                    p_new: s.p_new,
                    p_old: s.p_old,
                    achieved_p: e.value.achieved_p,
                    value_steps: e.value.steps,
                    identity_residual: e.identity_residual,
                });
            }
            by_group.insert(group.to_string(), ok as f64 / reqs.len() as f64);
        }
        self.dir.write_json(REQUESTS, &requests)?;
        let m = RomeMetrics {
            layer,
            covariance_lambda: cov.lambda,
            success_by_group: by_group,
            edits: rows,
        };
        self.dir.write_json("metrics/edit_rome.json", &m)?;
        self.edits = None;
        Ok(m)
    }

    pub fn edit_memit(&mut self) -> Result<MemitMetrics> {
        let layers = self.cfg.editor.memit_layers.clone();
        let n_layers = self.model()?.config.n_layers;
        self.cfg.editor.validate(n_layers)?;
        let requests = match self.dir.path(REQUESTS).exists() {
            true => self.edits()?.requests.clone(),
            false => self.split()?,
        };
        let covs = layers
            .iter()
            .map(|&l| self.covariance(l))
            .collect::<Result<Vec<_>>>()?;
        let corpus = self.corpus()?.clone();
        let model = self.model()?.clone();
        let ctx = EditContext {
            vocab: &corpus.vocab,
            templates: &corpus.templates,
        };
        self.say(&format!("memit: {} edits over layers {layers:?}", requests.train.len()));
        let e = memit_edit(
            &model,
            &requests.train,
            &covs,
            ctx,
            &self.cfg.editor.value,
            self.cfg.editor.memit_cov_weight,
        )?;
        for w in &e.layers {
            let rel = format!("edits/memit/layer{}.bin", w.layer);
            w.save(&self.dir.prepare(&rel)?)?;
            self.dir.track(&rel);
            self.dir.track(&rel.replace(".bin", ".json"));
        }
        let m = MemitMetrics {
            layers,
            success: e.success.fraction,
            per_request: e.success.per_request,
        };
        self.dir.write_json("metrics/edit_memit.json", &m)?;
        Ok(m)
    }

    fn train_one(&mut self, reqs: &[EditRequest], mask_rel: &str, state_rel: Option<&str>) -> Result<MaskSummary> {
        let layer = self.cfg.editor.rome_layer;
        let corpus = self.corpus()?.clone();
        let model = self.model()?.clone();
        let edits = self.edits()?.weights_for(reqs);
        let samples = build_samples(&model, &edits, &corpus.vocab, &corpus.neutral_train)?;
        self.say(&format!(
            "training mask on {} edits for {} epochs",
            samples.len(),
            self.cfg.mask.epochs
        ));
        let training = train_shared_mask(&model, layer, &samples, &self.cfg.mask)?;
        let soft = training.state.soft();
        let sweep = gamma_sweep(&model, layer, &samples, &soft, &self.cfg.experiment.gamma_grid)?;
        let gamma = match self.cfg.experiment.gamma_selection {
            GammaSelection::Fixed => self.cfg.mask.gamma,
            GammaSelection::Sweep => match select_gamma(&sweep, self.cfg.experiment.pruned_budget) {
                Some(p) => p.gamma,
                None => {
                    self.dir
                        .note("gamma_fallback", "no sweep point within the pruned budget; used mask.gamma");
                    self.cfg.mask.gamma
                }
            },
        };
        let mut state = training.state.clone();
        state.gamma = gamma;
        let mask = state.binarize();
        if let Some(rel) = state_rel {
            let extra = serde_json::json!({
                "config": self.cfg.mask,
                "layer": layer,
                "tau_schedule": "tau_start / (1 + tau_decay * epoch / epochs)",
                "temperature_schedule": "linear t_start -> t_max",
            });
            state.save(&self.dir.prepare(rel)?, extra)?;
            self.dir.track(rel);
            self.dir.track(&rel.replace(".bin", ".json"));
            let log_rel = "masks/training_log.csv";
            self.dir.write(log_rel, training.log_csv().as_bytes())?;
        }
        mask.save(&self.dir.prepare(mask_rel)?)?;
        self.dir.track(mask_rel);
        Ok(MaskSummary {
            gamma,
            gamma_selection: self.cfg.experiment.gamma_selection,
            pruned_fraction: mask.pruned_fraction(),
            checksum: mask.checksum(),
            sweep,
            final_log: training.log.last().copied(),
        })
    }

    pub fn train_mask(&mut self) -> Result<MaskMetrics> {
        self.train_mask_with(true)
    }

    /// Trains the shared mask and, when `disjoint` is set and the split has
    /// one, the relation-disjoint mask.
    pub fn train_mask_with(&mut self, disjoint: bool) -> Result<MaskMetrics> {
        let requests = self.edits()?.requests.clone();
        let shared = self.train_one(&requests.train, MASK, Some(MASK_STATE))?;
        let disjoint = if !disjoint || requests.disjoint_train.is_empty() {
            None
        } else {
            Some(self.train_one(&requests.disjoint_train, DISJOINT_MASK, None)?)
        };
        let m = MaskMetrics {
            layer: self.cfg.editor.rome_layer,
            shared,
            disjoint,
        };
        self.dir.write_json("metrics/mask.json", &m)?;
        self.masks.clear();
        Ok(m)
    }

    pub fn evaluate(&mut self) -> Result<EvalMetrics> {
        self.say("evaluating");
        let corpus = self.corpus()?.clone();
        let model = self.model()?.clone();
        let set = self.edits()?.clone();
        let mask = self.mask(MASK)?.clone();
        let reqs = &set.requests;
        let train_w = set.weights_for(&reqs.train);
        let train_records = mask_reversals(&model, &reqs.train, &train_w, &mask, &corpus.vocab)?;
        let test_records = mask_reversals(&model, &reqs.test, &set.weights_for(&reqs.test), &mask, &corpus.vocab)?;
        let disjoint_test_rsr = if reqs.disjoint_test.is_empty() || !self.dir.path(DISJOINT_MASK).exists() {
            None
        } else {
            let dm = self.mask(DISJOINT_MASK)?.clone();
            let rs = mask_reversals(
                &model,
                &reqs.disjoint_test,
                &set.weights_for(&reqs.disjoint_test),
                &dm,
                &corpus.vocab,
            )?;
            Some(rsr(&rs)?)
        };

        let text = self.ppl_text(&corpus).to_vec();
        let ppl_m = model.perplexity(&text)?;
        let (mut sum_e, mut sum_p, mut le) = (0.0, 0.0, 0);
        let mut pairs = Vec::new();
        let mut before = Vec::new();
        let mut after = Vec::new();
        for (r, w) in reqs.train.iter().zip(&train_w) {
            let me = w.apply_to(&model, w.edited.clone())?;
            let mp = w.apply_to(&model, masked_matrix(&w.edited, &mask)?)?;
            let (pe, pp) = (me.perplexity(&text)?, mp.perplexity(&text)?);
            sum_e += pe;
            sum_p += pp;
            le += usize::from(pp <= pe);
            let prompt = r.fact.prompt(&corpus.vocab)?.tokens;
            pairs.push(kl_pair(&model, &me, &mp, &prompt, self.cfg.experiment.kl_temperature)?);
            before.push(model.object_prob(&prompt, r.fact.object)?);
            after.push(me.object_prob(&prompt, r.new_object)?);
        }
        let n = train_w.len() as f64;
        let overlap =
            train_records.iter().filter(|r| r.top1_m == r.top1_mp).count() as f64 / train_records.len() as f64;
        let m = EvalMetrics {
            train_rsr: rsr(&train_records)?,
            test_rsr: rsr(&test_records)?,
            disjoint_test_rsr,
            top1_overlap_train: overlap,
            perplexity: PerplexityTriple {
                ppl_m,
                ppl_me: sum_e / n,
                ppl_mp: sum_p / n,
            },
            ppl_mp_le_me_edits: le,
            kl: summarize_kl(pairs, self.cfg.experiment.kl_temperature)?,
            signal: signal_stats(&before, &after)?,
            train_records,
            test_records,
        };
        self.dir.write("metrics/reversal_train.csv", records_csv(&m.train_records).as_bytes())?;
        self.dir.write("metrics/reversal_test.csv", records_csv(&m.test_records).as_bytes())?;
        self.dir.write_json("metrics/evaluate.json", &m)?;
        Ok(m)
    }

    /// Original, per-edit edited and per-edit pruned models with matching queries.
    fn triples(&mut self) -> Result<(TransformerModel, Vec<TransformerModel>, Vec<TransformerModel>, Vec<TraceQuery>)> {
        let corpus = self.corpus()?.clone();
        let model = self.model()?.clone();
        let set = self.edits()?.clone();
        let mask = self.mask(MASK)?.clone();
        let mut me = Vec::new();
        let mut mp = Vec::new();
        let mut queries = Vec::new();
        for r in &set.requests.train {
            let w = &set.weights[&r.edit_id()];
            me.push(w.apply_to(&model, w.edited.clone())?);
            mp.push(w.apply_to(&model, masked_matrix(&w.edited, &mask)?)?);
            queries.push(TraceQuery {
                tokens: r.fact.prompt(&corpus.vocab)?.tokens,
                o: r.fact.object,
                o_star: r.new_object,
            });
        }
        Ok((model, me, mp, queries))
    }

    pub fn analyze_decompose(&mut self) -> Result<DecomposeMetrics> {
        self.say("analysis: decomposition");
        let layer = self.cfg.editor.rome_layer;
        let (model, me, mp, queries) = self.triples()?;
        let sets = [
            ModelSet::shared("M", &model),
            ModelSet::paired("M_e", me.iter().collect()),
            ModelSet::paired("M_p", mp.iter().collect()),
        ];
        let mut residues = Vec::new();
        for conv in [Convention::RawAdditive, Convention::FrozenLn] {
            let cmp = compare_traces(&sets, &queries, conv)?;
            self.dir
                .write(&format!("analysis/decompose_{}.csv", conv.tag()), cmp.to_csv().as_bytes())?;
            let mut worst: f64 = 0.0;
            for s in &sets {
                for star in [false, true] {
                    for t in decompose_set(s, &queries, star, conv)? {
                        worst = worst.max(t.residue());
                    }
                }
            }
            residues.push(worst);
        }
        let t_m = decompose_set(&sets[0], &queries, true, Convention::RawAdditive)?;
        let t_e = decompose_set(&sets[1], &queries, true, Convention::RawAdditive)?;
        let t_p = decompose_set(&sets[2], &queries, true, Convention::RawAdditive)?;
        let m = DecomposeMetrics {
            layer,
            amplification: edited_layer_amplification(&t_m, &t_e, layer)?,
            downstream_attention_o_star: AttentionToTarget {
                original: downstream_attention(&t_m, layer),
                edited: downstream_attention(&t_e, layer),
                pruned: downstream_attention(&t_p, layer),
            },
            max_residue_raw: residues[0],
            max_residue_frozen: residues[1],
        };
        self.dir.write_json("analysis/decompose.json", &m)?;
        Ok(m)
    }

    pub fn analyze_mask(&mut self) -> Result<MaskAnalysis> {
        self.say("analysis: mask structure");
        let mask = self.mask(MASK)?.clone();
        let set = self.edits()?.clone();
        let structure = mask_structure(&mask, self.cfg.experiment.top_k_columns);
        let stats = set
            .weights_for(&set.requests.train)
            .iter()
            .map(|w| delta_magnitude_stats(w, &mask))
            .collect::<Result<Vec<_>>>()?;
        let n = stats.len() as f64;
        let mean_opt = |f: &dyn Fn(&crate::lens::DeltaStats) -> Option<f64>| -> Option<f64> {
            let v: Vec<f64> = stats.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let m = MaskAnalysis {
            mean_abs_delta: stats.iter().map(|s| s.mean_abs_delta).sum::<f64>() / n,
            masked_mean_abs_delta: mean_opt(&|s| s.masked_mean_abs_delta),
            top_delta_overlap: mean_opt(&|s| s.top_delta_overlap),
            structure,
        };
        let mut csv = String::from("column,pruned_pct\n");
        for (j, p) in m.structure.per_column_pct.iter().enumerate() {
            csv.push_str(&format!("{j},{p}\n"));
        }
        self.dir.write("analysis/mask_columns.csv", csv.as_bytes())?;
        self.dir.write_json("analysis/mask_structure.json", &m)?;
        Ok(m)
    }

    pub fn analyze_trajectories(&mut self) -> Result<TrajectoryMetrics> {
        self.say("analysis: trajectories");
        let mask = self.mask(MASK)?.clone();
        let dims: Vec<usize> = mask_structure(&mask, self.cfg.experiment.top_k_columns)
            .top
            .iter()
            .map(|c| c.column)
            .collect();
        let (model, me, mp, queries) = self.triples()?;
        let prompts: Vec<Vec<usize>> = queries.iter().map(|q| q.tokens.clone()).collect();
        let sets = [
            ModelSet::shared("M", &model),
            ModelSet::paired("M_e", me.iter().collect()),
            ModelSet::paired("M_p", mp.iter().collect()),
        ];
        let rows = dimension_trajectories(&sets, &dims, &prompts)?;
        self.dir.write("analysis/trajectories.csv", trajectories_csv(&rows).as_bytes())?;
        let mut de = 0.0;
        let mut dp = 0.0;
        for (i, p) in prompts.iter().enumerate() {
            let g = activation_heatmap(&model, p)?;
            let ge = activation_heatmap(&me[i], p)?;
            let gp = activation_heatmap(&mp[i], p)?;
            if i == 0 {
                self.dir.write("analysis/heatmap_M.csv", grid_csv(&g).as_bytes())?;
                self.dir.write("analysis/heatmap_M_e.csv", grid_csv(&ge).as_bytes())?;
                self.dir.write("analysis/heatmap_M_p.csv", grid_csv(&gp).as_bytes())?;
            }
            de += (&ge - &g).mapv(|x| x * x).sum().sqrt();
            dp += (&gp - &g).mapv(|x| x * x).sum().sqrt();
        }
        let n = prompts.len() as f64;
        let top = dims.first().copied();
        let m = TrajectoryMetrics {
            top1_distance_edited: top.map(|d| curve_distance(&rows, "M", "M_e", d)).unwrap_or(0.0),
            top1_distance_pruned: top.map(|d| curve_distance(&rows, "M", "M_p", d)).unwrap_or(0.0),
            dims,
            heatmap_distance_edited: de / n,
            heatmap_distance_pruned: dp / n,
        };
        self.dir.write_json("analysis/trajectories.json", &m)?;
        Ok(m)
    }

    pub fn prune_sweep(&mut self) -> Result<SweepMetrics> {
        self.say("pruning sweep");
        let layer = self.cfg.editor.rome_layer;
        let corpus = self.corpus()?.clone();
        let model = self.model()?.clone();
        let set = self.edits()?.clone();
        let n = self.cfg.editor.covariance_tokens.min(corpus.neutral_train.len());
        let stats = activation_stats(&model, layer, &corpus.neutral_train[..n])?;
        let points = sweep(
            &model,
            &set.requests.train,
            &set.weights_for(&set.requests.train),
            &corpus.vocab,
            &PruneCriterion::ALL,
            &self.cfg.experiment.prune_pcts,
            &[PruneMode::Original, PruneMode::Zero],
            Some(&stats),
        )?;
        self.dir.write("metrics/prune_sweep.csv", sweep_csv(&points).as_bytes())?;
        let m = SweepMetrics {
            pct_for_half_rsr: PruneCriterion::ALL
                .iter()
                .map(|&c| (c.tag().to_string(), pct_to_reach(&points, c, PruneMode::Original, 0.5)))
                .collect(),
            points,
        };
        self.dir.write_json("metrics/prune_sweep.json", &m)?;
        Ok(m)
    }

    pub fn block_edit(&mut self) -> Result<BlockingReport> {
        self.say("edit blocking");
        let layer = self.cfg.editor.rome_layer;
        let corpus = self.corpus()?.clone();
        let model = self.model()?.clone();
        let reqs = self.edits()?.requests.train.clone();
        let mask = self.mask(MASK)?.clone();
        let cov = self.covariance(layer)?;
        let ctx = EditContext {
            vocab: &corpus.vocab,
            templates: &corpus.templates,
        };
        let report = blocking_report(&model, &reqs, &mask, &cov, ctx, &self.cfg.editor.value)?;
        self.dir.note("blocking_scope", "mask active during value optimization and in the final matrix");
        self.dir.write("metrics/blocking.csv", report.to_csv(&corpus.vocab).as_bytes())?;
        self.dir.write_json("metrics/blocking.json", &report)?;
        Ok(report)
    }

    /// Every stage in order, then a compact summary.
    pub fn reproduce(&mut self) -> Result<Summary> {
        self.gen_corpus()?;
        let pre = self.pretrain()?;
        let rome = self.edit_rome()?;
        let memit = self.edit_memit()?;
        let mask = self.train_mask()?;
        let eval = self.evaluate()?;
        let dec = self.analyze_decompose()?;
        self.analyze_mask()?;
        self.analyze_trajectories()?;
        self.prune_sweep()?;
        let block = self.block_edit()?;
        let s = Summary {
            recall: pre.recall,
            rome_train_success: rome.success_by_group.get("train").copied().unwrap_or(0.0),
            memit_success: memit.success,
            mask_gamma: mask.shared.gamma,
            mask_pruned_fraction: mask.shared.pruned_fraction,
            mask_checksum: mask.shared.checksum,
            train_rsr: eval.train_rsr,
            test_rsr: eval.test_rsr,
            disjoint_test_rsr: eval.disjoint_test_rsr,
            perplexity: eval.perplexity,
            amplification_ratio: dec.amplification.ratio,
            blocking_standard: block.total.standard_rate(),
            blocking_blocked: block.total.blocked_rate(),
        };
        self.dir.write_json("metrics/summary.json", &s)?;
        Ok(s)
    }
}
