use fliplearn_core::eval::{
    compare_runs, evaluate, label_sweep_eval, score_instances, EvalReport, Metric,
};
use fliplearn_core::inference::{OptionScorer, OptionScores};
use fliplearn_core::rendering::RenderMode;
use fliplearn_core::task_schema::{
    builtin_binary_variants, builtin_variants_for, Instance, LabelOptionSet, PromptTemplate,
    Segment, TaskKind, TaskSet, Verbalizer,
};
use fliplearn_core::Result;

/// Picks an option from the template and instance alone, never looking at
/// label surfaces.
struct Fixture<F>(F);

impl<F: Fn(&PromptTemplate, &Instance) -> usize + Sync> OptionScorer for Fixture<F> {
    fn score(
        &self,
        mode: RenderMode,
        template: &PromptTemplate,
        inst: &Instance,
        _verbalizer: &Verbalizer,
        calibrated: bool,
    ) -> Result<OptionScores> {
        let pick = (self.0)(template, inst);
        let scores = (0..inst.options.len())
            .map(|i| if i == pick { 0.0 } else { -1.0 })
            .collect();
        Ok(OptionScores::new(scores, mode, calibrated))
    }
}

fn template(id: &str) -> PromptTemplate {
    PromptTemplate::new(
        id,
        vec![
            Segment::Instruction("is it good ?".into()),
            Segment::Input("text".into()),
        ],
    )
    .unwrap()
}

fn binary_task(templates: &[&str], n: usize) -> TaskSet {
    let instances = (0..n)
        .map(|i| {
            Instance::new(
                [("text", format!("item {i}"))],
                LabelOptionSet::new(vec!["pos".into(), "neg".into()], i % 2).unwrap(),
            )
        })
        .collect();
    TaskSet::new(
        "binary",
        TaskKind::Classification,
        templates.iter().map(|id| template(id)).collect(),
        vec![Verbalizer::new("yn", [("pos", "yes"), ("neg", "no")])],
        instances,
        None,
    )
    .unwrap()
}

fn instance_number(inst: &Instance) -> usize {
    inst.inputs["text"]
        .rsplit(' ')
        .next()
        .unwrap()
        .parse()
        .unwrap()
}

#[test]
fn perfect_single_template() {
    let task = binary_task(&["only"], 6);
    let perfect = Fixture(|_: &PromptTemplate, inst: &Instance| inst.options.correct_index());
    let r = evaluate(&perfect, &task, RenderMode::Flipped, Metric::MacroF1, false).unwrap();
    assert_eq!(r.mean, 1.0);
    assert_eq!(r.std, 0.0);
    assert_eq!(r.per_template.len(), 1);
    assert_eq!(r.metadata.std_kind, "population");
}

#[test]
fn two_templates_mean_and_population_std() {
    let task = binary_task(&["a", "b"], 10);
    // Template a errs on instances 0 and 1, template b on 0..4.
    let fixture = Fixture(|t: &PromptTemplate, inst: &Instance| {
        let wrong = if t.id == "a" { 2 } else { 4 };
        let c = inst.options.correct_index();
        if instance_number(inst) < wrong {
            1 - c
        } else {
            c
        }
    });
    let r = evaluate(&fixture, &task, RenderMode::Direct, Metric::Accuracy, false).unwrap();
    assert!((r.per_template[0].value - 0.8).abs() < 1e-12);
    assert!((r.per_template[1].value - 0.6).abs() < 1e-12);
    assert!((r.mean - 0.7).abs() < 1e-12);
    assert!((r.std - 0.1).abs() < 1e-12);
    let values: Vec<f64> = r.per_template.iter().map(|t| t.value).collect();
    assert!((r.mean - values.iter().sum::<f64>() / 2.0).abs() < 1e-12);
}

#[test]
fn empty_task_is_an_error() {
    let mut task = binary_task(&["a"], 2);
    task.instances.clear();
    let fixture = Fixture(|_: &PromptTemplate, _: &Instance| 0);
    assert!(evaluate(&fixture, &task, RenderMode::Direct, Metric::MacroF1, false).is_err());
}

#[test]
fn surface_blind_model_is_flat_across_variants() {
    let task = binary_task(&["a", "b"], 12);
    let blind = Fixture(|_: &PromptTemplate, inst: &Instance| {
        usize::from(instance_number(inst).is_multiple_of(3))
    });
    let variants = builtin_variants_for(&task).unwrap();
    let r = label_sweep_eval(
        &blind,
        &task,
        RenderMode::Flipped,
        Metric::MacroF1,
        false,
        &variants,
    )
    .unwrap();
    assert_eq!(r.per_variant.len(), 20);
    let names: Vec<&str> = r.per_variant.iter().map(|v| v.variant.as_str()).collect();
    let expected: Vec<&str> = variants.iter().map(|v| v.name.as_str()).collect();
    assert_eq!(names, expected);
    let first = r.per_variant[0].value;
    assert!(r.per_variant.iter().all(|v| v.value == first));
    let plain = evaluate(&blind, &task, RenderMode::Flipped, Metric::MacroF1, false).unwrap();
    assert_eq!(plain.mean, first);
    assert_eq!(r.best_variant.as_ref().unwrap().value, first);
}

#[test]
fn sweep_rejects_arity_mismatch() {
    let task = binary_task(&["a"], 4);
    let triple = builtin_binary_variants()[0].clone();
    let mut bad = triple.clone();
    bad.surfaces.push("maybe".into());
    let labels: Vec<String> = vec!["pos".into(), "neg".into(), "other".into()];
    let v = bad.to_verbalizer(&labels).unwrap();
    let fixture = Fixture(|_: &PromptTemplate, _: &Instance| 0);
    assert!(label_sweep_eval(
        &fixture,
        &task,
        RenderMode::Direct,
        Metric::MacroF1,
        false,
        &[v]
    )
    .is_err());
}

#[test]
fn score_records_flag_matches() {
    let task = binary_task(&["a"], 4);
    let always_zero = Fixture(|_: &PromptTemplate, _: &Instance| 0);
    let records = score_instances(&always_zero, &task, RenderMode::Channel, false).unwrap();
    assert_eq!(records.len(), 4);
    let matches: Vec<bool> = records.iter().map(|r| r.matched).collect();
    assert_eq!(matches, vec![true, false, true, false]);
    let json = serde_json::to_string(&records[1]).unwrap();
    assert!(json.contains("\"match\":false"));
}

fn report(mean: f64, metric: Metric, mode: RenderMode) -> EvalReport {
    let task = binary_task(&["a"], 2);
    let perfect = Fixture(|_: &PromptTemplate, inst: &Instance| inst.options.correct_index());
    let mut r = evaluate(&perfect, &task, mode, metric, false).unwrap();
    r.mean = mean;
    r
}

#[test]
fn compare_deltas() {
    let a = report(0.55, Metric::MacroF1, RenderMode::Direct);
    let b = report(0.75, Metric::MacroF1, RenderMode::Flipped);
    let table = compare_runs(&[a.clone(), b], 0).unwrap();
    assert!((table.rows[1].delta - 0.20).abs() < 1e-12);
    assert_eq!(table.rows[0].delta, 0.0);
    let same = compare_runs(&[a.clone(), a.clone(), a.clone()], 1).unwrap();
    assert!(same.rows.iter().all(|r| r.delta == 0.0));
    let other = report(0.5, Metric::Accuracy, RenderMode::Direct);
    assert!(compare_runs(&[a, other], 0).is_err());
}

#[test]
fn report_json_round_trip() {
    let r = report(0.625, Metric::MacroF1, RenderMode::Channel);
    let back = EvalReport::from_json(&r.to_json().unwrap()).unwrap();
    assert_eq!(back, r);
    assert!(r.to_text().contains("mean 0.6250"));
}
