use edgestereo::checkpoint::Checkpoint;
use edgestereo::data::{Dataset, GeneratorConfig};
use edgestereo::train::{run_phase, train, PhasePlan, TrainHooks, TrainState};
use edgestereo::{EdgeStereo, Error, ModelConfig, Tensor};

fn smoothed(trace: &[f32], window: usize) -> (f32, f32) {
    let mean = |s: &[f32]| s.iter().sum::<f32>() / s.len() as f32;
    (mean(&trace[..window]), mean(&trace[trace.len() - window..]))
}

#[test]
fn phase_two_lowers_the_loss() {
    let data = Dataset::synthetic(&GeneratorConfig::toy(), 32, 4).unwrap();
    let plan = PhasePlan::three_phase([0, 200, 0], 2, 1e-3, true);
    let mut model = EdgeStereo::<f32>::new(ModelConfig::toy()).unwrap();
    let trace = run_phase(&mut model, &plan.phases[1], &data, 1).unwrap();
    assert_eq!(trace.len(), 200);
    let (first, last) = smoothed(&trace, 20);
    // reference run: ratio 0.67
    assert!(last < 0.8 * first, "smoothed loss {first} -> {last}");
}

#[test]
fn resumed_run_matches_uninterrupted() {
    let data = Dataset::synthetic(&GeneratorConfig::toy(), 8, 2).unwrap();
    let plan = PhasePlan::three_phase([4, 6, 5], 2, 1e-3, true);
    let fresh = || EdgeStereo::<f32>::new(ModelConfig::toy()).unwrap();

    let mut whole = fresh();
    let full = train(&mut whole, &plan, &data, 9, TrainState::start(), TrainHooks::default()).unwrap();

    for stop in [(0, 2), (1, 0), (1, 3), (2, 4)] {
        let mut first = fresh();
        let hooks = TrainHooks {
            stop_before: Some(stop),
            ..Default::default()
        };
        let paused = train(&mut first, &plan, &data, 9, TrainState::start(), hooks).unwrap();
        assert_eq!((paused.phase_index, paused.iteration), stop);
        let bytes = Checkpoint::capture(&first, &paused).to_bytes().unwrap();
        let (mut resumed, state) = Checkpoint::from_bytes(&bytes).unwrap().into_model().unwrap();
        let done = train(&mut resumed, &plan, &data, 9, state, TrainHooks::default()).unwrap();
        assert_eq!(done.traces, full.traces, "resume at {stop:?}");
        for (a, b) in whole.store.params().iter().zip(resumed.store.params()) {
            assert_eq!(a.value, b.value, "{} after resume at {stop:?}", a.name);
        }
    }
}

#[test]
fn non_finite_loss_reports_phase_and_trace() {
    let data = Dataset::synthetic(&GeneratorConfig::toy(), 4, 0).unwrap();
    let mut model = EdgeStereo::<f32>::new(ModelConfig::toy()).unwrap();
    let id = model
        .store
        .ids()
        .find(|&id| model.store.get(id).name.starts_with("decoder."))
        .unwrap();
    let shape = model.store.value(id).shape().to_vec();
    model.store.set_value(id, Tensor::full(&shape, f32::NAN)).unwrap();
    let plan = PhasePlan::three_phase([1, 3, 0], 2, 1e-3, true);
    match train(&mut model, &plan, &data, 0, TrainState::start(), TrainHooks::default()) {
        Err(Error::NonFiniteLoss { phase, iteration, trace }) => {
            assert_eq!((phase, iteration), (2, 0));
            assert!(trace.is_empty());
        }
        other => panic!("expected a non-finite loss, got {other:?}"),
    }
}

#[test]
fn too_small_dataset_is_rejected_up_front() {
    let data = Dataset::synthetic(&GeneratorConfig::toy(), 1, 0).unwrap();
    let mut model = EdgeStereo::<f32>::new(ModelConfig::toy()).unwrap();
    let plan = PhasePlan::three_phase([1, 1, 1], 2, 1e-3, true);
    let r = train(&mut model, &plan, &data, 0, TrainState::start(), TrainHooks::default());
    assert!(matches!(r, Err(Error::DatasetExhausted { available: 1, required: 2 })));
}
