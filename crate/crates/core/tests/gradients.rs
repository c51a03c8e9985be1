mod common;

use common::{random_prompt, with_adapter};
use qfsum_core::config::{AdapterKind, ArchConfig, HyperMode, InfiniMode};
use qfsum_core::model::{forward, init_params, ForwardOptions};
use qfsum_core::params::is_backbone_param;
use qfsum_core::prompt::Prompted;
use qfsum_core::ParamStore;
use qfsum_tensor::gradcheck::check;
use qfsum_tensor::Rng;

/// Finite-difference check of the summary loss with respect to `names`.
fn fd_error(arch: &ArchConfig, store: &ParamStore<f64>, p: &Prompted, names: &[String]) -> f64 {
    let inputs: Vec<_> = names.iter().map(|n| store.get(n).unwrap().clone()).collect();
    let targets = p.target_pairs();
    check(&inputs, 1e-6, |tape, vars| {
        let mut bound = store.bind(tape, &|_| false);
        for (n, v) in names.iter().zip(vars) {
            bound.insert(n.clone(), *v);
        }
        let out = forward(arch, &bound, &p.tokens, Some(&p.spans), None, ForwardOptions::default(), &mut Rng::seed(0))
            .expect("forward");
        out.logits.cross_entropy(&targets)
    })
    .unwrap()
    .max_rel_error()
}

fn randomised(arch: &ArchConfig, seed: u64) -> ParamStore<f64> {
    let mut store = init_params::<f64>(arch, seed);
    let mut rng = Rng::seed(seed + 1000);
    let names: Vec<String> = store.names().filter(|n| !is_backbone_param(n)).cloned().collect();
    for n in names {
        let shape = store.get(&n).unwrap().shape().to_vec();
        store.insert(n, rng.normal_tensor(&shape, 0.3));
    }
    store
}

fn trainable_names(store: &ParamStore<f64>) -> Vec<String> {
    store.names().filter(|n| !is_backbone_param(n)).cloned().collect()
}

#[test]
fn regular_adapters_match_finite_differences() {
    let mut rng = Rng::seed(1);
    for kind in [AdapterKind::Lora, AdapterKind::Prompt, AdapterKind::Padapter] {
        let arch = with_adapter(kind, HyperMode::Off);
        let store = randomised(&arch, 1);
        let p = random_prompt(&mut rng, 6);
        let err = fd_error(&arch, &store, &p, &trainable_names(&store));
        assert!(err <= 1e-4, "{kind:?}: {err}");
    }
}

#[test]
fn hypernetwork_matches_finite_differences() {
    let mut rng = Rng::seed(2);
    for (kind, mode) in [
        (AdapterKind::Lora, HyperMode::Parallel),
        (AdapterKind::Lora, HyperMode::Sequential),
        (AdapterKind::Prompt, HyperMode::Parallel),
        (AdapterKind::Padapter, HyperMode::Parallel),
    ] {
        let arch = with_adapter(kind, mode);
        let store = randomised(&arch, 2);
        let p = random_prompt(&mut rng, 6);
        let names: Vec<String> = trainable_names(&store);
        assert!(names.iter().any(|n| n.starts_with("hyper.")));
        let err = fd_error(&arch, &store, &p, &names);
        assert!(err <= 1e-4, "{kind:?}/{mode:?}: {err}");
    }
}

#[test]
fn memory_path_matches_finite_differences() {
    let mut rng = Rng::seed(3);
    for mode in [InfiniMode::Inf, InfiniMode::QfInf] {
        let mut arch = with_adapter(AdapterKind::Lora, HyperMode::Off);
        arch.infini.mode = mode;
        arch.infini.segment_len = 20;
        let store = randomised(&arch, 3);
        // several segments, so retrieval and both memories are exercised
        let p = random_prompt(&mut rng, 40);
        let names: Vec<String> = trainable_names(&store)
            .into_iter()
            .filter(|n| n.starts_with("infini.") || n.contains("lora_q"))
            .collect();
        let err = fd_error(&arch, &store, &p, &names);
        assert!(err <= 1e-4, "{mode:?}: {err}");
    }
}
