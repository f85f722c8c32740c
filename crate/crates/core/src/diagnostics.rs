//! Finite-difference gradient check of the full model on real prompts from a tiny graph.

use crate::hetgraph::{Metapath, NodeId, RelationType};
use crate::nn::{gradient_check, GradCheckReport, Model, ModelInput, Target};
use crate::prompts::PromptInstance;
use crate::synth::{generate_graph, SynthConfig, SKILL_TASK};
use crate::train::{RunConfig, Setup, TaskKind, TrainError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Coordinates probed per tensor and example.
    pub per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            epsilon: 3e-4,
            per_tensor: 8,
            seed: 0,
        }
    }
}

/// Two-layer, two-head, width-16 configuration over a 12-member, 8-job graph.
pub fn tiny_run_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.synth = SynthConfig {
        n_members: 12,
        n_jobs: 8,
        n_clusters: 2,
        p_in: 0.5,
        p_out: 0.05,
        p_uu: 0.3,
        ..SynthConfig::default()
    };
    c.model.layers = 2;
    c.model.heads = 2;
    c.model.d_model = 16;
    c.model.d_ff = 32;
    c.model.context = 96;
    c.ego.fanout = 2;
    c.split.min_degree = 3;
    c.train.tasks = vec![TaskKind::link_ui(), TaskKind::Node(SKILL_TASK.into())];
    c
}

fn examples(setup: &Setup) -> Result<Vec<(ModelInput, Target)>, TrainError> {
    let g = &setup.train_graph;
    let b = setup.builder(g);
    let mut out = Vec::new();
    let mut push = |inst: PromptInstance| -> Result<(), TrainError> {
        if let (input, Some(t)) = setup.encode(g, &inst, true)? {
            out.push((input, t));
        }
        Ok(())
    };
    let uu = Metapath::parse("UU")?;
    let ui = Metapath::parse("UI")?;
    let uiu = Metapath::parse("UIU")?;
    let mut wanted = [false; 4];
    for k in g.members() {
        let ego = setup.sample_ego(g, k, k.0 as u64)?;
        if !wanted[0] {
            if let Some(f) = setup.feature_of(k) {
                push(b.feature(&ego, k, f)?)?;
                wanted[0] = true;
            }
        }
        for (slot, built) in [
            (1, b.first_order(&ego, k, &ui, 1).or_else(|_| b.first_order(&ego, k, &uu, 1))),
            (2, b.higher_order(&ego, k, &uiu, 2)),
            (3, b.link_task(&ego, k, RelationType::MemberJob, 3)),
        ] {
            if !wanted[slot] {
                if let Ok(inst) = built {
                    push(inst)?;
                    wanted[slot] = true;
                }
            }
        }
    }
    if wanted.iter().any(|w| !w) {
        return Err(TrainError::Config("tiny graph did not yield every prompt kind".into()));
    }
    let (idx, spec) = setup.task_spec(SKILL_TASK).expect("skill task configured");
    let k = NodeId(1);
    let input = setup.node_task_input(k, spec, 4, true)?;
    out.push((
        input,
        Target::Class {
            task: idx,
            class: setup.full.label(k, SKILL_TASK).unwrap_or(0),
        },
    ));
    Ok(out)
}

/// Merged report over tied and untied heads and every prompt kind. Bias vectors
/// are set away from zero so their gradients are exercised.
pub fn tiny_gradient_check(opts: GradCheckOptions) -> Result<GradCheckReport, TrainError> {
    let cfg = tiny_run_config();
    let g = generate_graph(&cfg.synth)?.graph;
    let setup = Setup::new(g, &cfg)?;
    let exs = examples(&setup)?;
    let mut report: Option<GradCheckReport> = None;
    for tie in [true, false] {
        let mut c = cfg.clone();
        c.model.tie_heads = tie;
        let mut model = Model::<f64>::new(setup.model_config(&c), opts.seed)?;
        for (i, x) in model.store.value_mut(model.ids.attn_bias).data_mut().iter_mut().enumerate() {
            *x = 0.05 * ((i % 5) as f64) - 0.1;
        }
        for (j, (input, target)) in exs.iter().enumerate() {
            let r = gradient_check(&mut model, input, target, opts.epsilon, opts.per_tensor, opts.seed + j as u64)?;
            match report.as_mut() {
                Some(acc) => acc.merge(r),
                None => report = Some(r),
            }
        }
    }
    Ok(report.expect("at least one example"))
}
