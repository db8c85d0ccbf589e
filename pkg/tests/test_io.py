import json
import os

import numpy as np
import pytest

from core.data.loaders import MUSK_FEATURES, bag_csv_text, load_bag_csv, load_musk1, save_bag_csv
from core.data.serialization import (
    atomic_write_text,
    format_report,
    inference_csv,
    iteration_log_csv,
    load_model,
    model_from_text,
    model_to_text,
    save_model,
)
from core.errors import ModelFormatError, ParseError
from core.evaluation import EvalReport
from core.mil_engine import IterationEvent
from core.models.bag import InferenceResult, initial_labels
from core.models.bif import bif_estimate
from core.models.classifiers import ClassifierKind
from core.models.density import DensityKind
from core.models.fib import fib_estimate

HEADER = "bag_id,bag_label,instance_label,f_1,f_2\n"


def write(tmp_path, text, name="bags.csv"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def gold_labeled(dataset):
    return dataset.with_latent_labels([bag.gold_labels for bag in dataset.bags])


# Bag CSV

def test_csv_round_trip_is_byte_identical(binary_dataset, tmp_path):
    path = str(tmp_path / "bags.csv")
    save_bag_csv(binary_dataset, path)
    loaded = load_bag_csv(path)
    with open(path, encoding="utf-8") as f:
        assert bag_csv_text(loaded) == f.read()
    for a, b in zip(binary_dataset.bags, loaded.bags):
        assert a.bag_id == b.bag_id and a.bag_label == b.bag_label
        np.testing.assert_array_equal(a.instances, b.instances)
        np.testing.assert_array_equal(a.gold_labels, b.gold_labels)


def test_csv_features_parse_to_the_exact_written_doubles(rng, tmp_path):
    values = rng.normal(size=(2000, 2)) * np.array([1.0, 1e-7])
    rows = "".join(f"b{k // 10},1,,{a:.17g},{b:.17g}\n" for k, (a, b) in enumerate(values))
    dataset = load_bag_csv(write(tmp_path, HEADER + rows))
    np.testing.assert_array_equal(dataset.pooled_instances(), values)


def test_csv_groups_rows_by_bag_id_in_file_order(tmp_path):
    text = HEADER + "x,2,2,1.0,1.0\ny,1,1,0.0,0.0\nx,2,1,0.5,0.5\n"
    dataset = load_bag_csv(write(tmp_path, text))
    assert [bag.bag_id for bag in dataset.bags] == ["x", "y"]
    assert dataset.bags[0].m == 2
    assert dataset.bags[0].gold_labels.tolist() == [2, 1]


def test_csv_label_count_is_inferred_or_given(tmp_path):
    path = write(tmp_path, HEADER + "a,1,,0,0\nb,3,,1,1\n")
    assert load_bag_csv(path).t == 3
    assert load_bag_csv(path, t=4).t == 4


def test_csv_without_instance_labels_has_no_gold(tmp_path):
    dataset = load_bag_csv(write(tmp_path, HEADER + "a,1,,0,0\na,1,,1,1\n"))
    assert dataset.bags[0].gold_labels is None
    assert not dataset.has_gold_labels


def test_csv_unlabeled_bags_are_allowed(tmp_path):
    dataset = load_bag_csv(write(tmp_path, HEADER + "a,,,0,0\n"), t=2)
    assert dataset.bags[0].bag_label is None
    assert not dataset.is_labeled


@pytest.mark.parametrize(
    "body, line",
    [
        ("a,1,,0.1,0.2\na,2,,0.3,0.4\n", 3),
        ("a,1,,0.1,0.2\nb,1,,x,0.4\n", 3),
        ("a,1,,0.1\n", 2),
        ("a,0,,0.1,0.2\n", 2),
        ("a,1,1,0.1,0.2\na,1,,0.3,0.4\n", 3),
    ],
    ids=["conflicting-bag-label", "non-numeric", "ragged", "label-zero", "mixed-instance-labels"],
)
def test_csv_errors_carry_the_line_number(body, line, tmp_path):
    with pytest.raises(ParseError) as info:
        load_bag_csv(write(tmp_path, HEADER + body))
    assert info.value.line_number == line
    assert f"line {line}" in str(info.value)


def test_csv_header_is_checked(tmp_path):
    with pytest.raises(ParseError):
        load_bag_csv(write(tmp_path, "id,label,f_1\na,1,0\n"))


def test_missing_file_is_a_parse_error(tmp_path):
    with pytest.raises(ParseError):
        load_bag_csv(str(tmp_path / "absent.csv"))


# MUSK1

def musk_row(molecule, conformation, value, label):
    return ",".join([molecule, conformation] + [str(value)] * MUSK_FEATURES + [str(label)])


def test_musk_rows_become_bags(tmp_path):
    rows = [musk_row("MUSK-1", "c1", 1, 1), musk_row("NON-A", "c1", 2, 0), musk_row("MUSK-1", "c2", 3, 1)]
    dataset = load_musk1(write(tmp_path, "\n".join(rows) + "\n", "clean1.data"))
    assert dataset.t == 2 and dataset.p == MUSK_FEATURES
    assert [bag.bag_id for bag in dataset.bags] == ["MUSK-1", "NON-A"]
    assert [bag.bag_label for bag in dataset.bags] == [2, 1]
    assert dataset.bags[0].instances[:, 0].tolist() == [1.0, 3.0]


def test_musk_bag_contents_do_not_depend_on_row_order(tmp_path):
    rows = [musk_row("M", "c1", 1, 1), musk_row("N", "c1", 2, 0), musk_row("M", "c2", 3, 0), musk_row("N", "c2", 4, 0)]
    forward = load_musk1(write(tmp_path, "\n".join(rows) + "\n", "a.data"))
    backward = load_musk1(write(tmp_path, "\n".join(rows[::-1]) + "\n", "b.data"))

    def contents(dataset):
        return {bag.bag_id: (bag.bag_label, sorted(bag.instances[:, 0].tolist())) for bag in dataset.bags}

    assert contents(forward) == contents(backward)
    assert contents(forward)["M"][0] == 2


def test_musk_column_count_is_checked(tmp_path):
    with pytest.raises(ParseError):
        load_musk1(write(tmp_path, "MUSK-1,c1,1,2,3,1\n", "short.data"))


def test_musk_class_must_be_binary(tmp_path):
    with pytest.raises(ParseError) as info:
        load_musk1(write(tmp_path, musk_row("M", "c1", 1, 1) + "\n" + musk_row("M", "c2", 1, 2) + "\n", "bad.data"))
    assert info.value.line_number == 2


# Model files

@pytest.mark.parametrize("kind", list(DensityKind))
def test_bif_model_round_trip(kind, binary_dataset, rng):
    params = bif_estimate(gold_labeled(binary_dataset), kind)
    restored, metadata = model_from_text(model_to_text(params, {"seed": 3}))
    assert metadata == {"seed": 3}
    np.testing.assert_array_equal(restored.bag_prior, params.bag_prior)
    np.testing.assert_array_equal(restored.instance_table, params.instance_table)
    X = rng.normal(size=(20, binary_dataset.p)) * 3.0
    np.testing.assert_array_equal(restored.class_log_densities(X), params.class_log_densities(X))


@pytest.mark.parametrize("kind", list(ClassifierKind))
def test_fib_model_round_trip(kind, binary_dataset, rng):
    params = fib_estimate(binary_dataset.with_latent_labels(initial_labels(binary_dataset)), kind)
    restored, _ = model_from_text(model_to_text(params))
    X = rng.normal(size=(20, binary_dataset.p)) * 3.0
    np.testing.assert_array_equal(restored.log_proba(X), params.log_proba(X))
    np.testing.assert_array_equal(restored.feature_density.logpdf_many(X), params.feature_density.logpdf_many(X))


def test_model_file_on_disk(binary_dataset, tmp_path):
    params = fib_estimate(binary_dataset.with_latent_labels(initial_labels(binary_dataset)), ClassifierKind.LR)
    path = str(tmp_path / "models" / "fib.json")
    save_model(params, path, {"iterations": 4})
    restored, metadata = load_model(path)
    assert metadata["iterations"] == 4
    assert restored.t == 2 and restored.p == binary_dataset.p


@pytest.mark.parametrize(
    "mutate",
    [
        lambda doc: doc.update(schema="something-else"),
        lambda doc: doc.update(version=99),
        lambda doc: doc.update(t=5),
        lambda doc: doc["params"].update(model_kind="ibf"),
        lambda doc: doc["params"].pop("bag_prior"),
    ],
    ids=["schema", "version", "header", "model-kind", "missing-field"],
)
def test_malformed_model_files_are_rejected(mutate, binary_dataset):
    document = json.loads(model_to_text(bif_estimate(gold_labeled(binary_dataset), DensityKind.GAUSS)))
    mutate(document)
    with pytest.raises(ModelFormatError):
        model_from_text(json.dumps(document))


def test_unreadable_model_files_are_rejected(tmp_path):
    with pytest.raises(ModelFormatError):
        model_from_text("{not json")
    with pytest.raises(ModelFormatError):
        load_model(str(tmp_path / "absent.json"))


# Reports and CSV products

def test_report_text_lists_every_key():
    report = EvalReport(
        name="bif/gauss", t=2, n_bags=3, bag_accuracy=2 / 3, bag_confusion=np.array([[1, 0], [1, 1]])
    )
    lines = format_report(report).splitlines()
    assert lines[0] == "model=bif/gauss"
    assert "bag_accuracy=0.666667" in lines
    assert "chance_rate=0.500000" in lines
    assert "instance_accuracy=NA" in lines
    assert "converged=NA" in lines
    assert lines[-4:] == ["bag_confusion:", "truth\\pred,1,2", "1,1,0", "2,1,1"]


def test_inference_csv_has_one_row_per_instance():
    result = InferenceResult(bag_label=2, instance_labels=[1, 2], label_scores=[-5.0, -3.5])
    lines = inference_csv([("b0", result)], 2).splitlines()
    assert lines == [
        "bag_id,instance,predicted_bag_label,predicted_instance_label,log_score_1,log_score_2",
        "b0,1,2,1,-5,-3.5",
        "b0,2,2,2,-5,-3.5",
    ]


def test_iteration_log_csv_leaves_unrecorded_likelihoods_empty():
    events = [IterationEvent(1, 7, -10.5, -11.0), IterationEvent(2, 0, None, None)]
    assert iteration_log_csv(events).splitlines() == [
        "iteration,labels_changed,loglik,objective",
        "1,7,-10.5,-11",
        "2,0,,",
    ]


def test_atomic_write_leaves_no_temporary_files(tmp_path):
    path = tmp_path / "out" / "report.txt"
    atomic_write_text(str(path), "model=x\n")
    atomic_write_text(str(path), "model=y\n")
    assert path.read_text() == "model=y\n"
    assert os.listdir(path.parent) == ["report.txt"]
