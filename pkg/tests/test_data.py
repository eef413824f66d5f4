import numpy as np
import pytest
from sklearn.feature_extraction.text import CountVectorizer
from sklearn.linear_model import LogisticRegression

from eibert.data import SyntheticTask, gen_data, generate_splits, read_tsv, to_batch_tensors
from eibert.errors import ConfigError, TaskError
from eibert.vocab import CLS_ID, N_RESERVED


class TestSyntheticTask:
    def test_vocab_too_small(self):
        with pytest.raises(TaskError):
            SyntheticTask(vocab_size=5, num_classes=2, tokens_per_class=1)

    def test_groups_disjoint_and_cover(self, small_task):
        classes, distractors = small_task.groups()
        ids = np.concatenate(classes + [distractors])
        assert len(ids) == len(set(ids.tolist())) == small_task.vocab_size - N_RESERVED
        assert ids.min() >= N_RESERVED

    def test_label_rule(self):
        task = SyntheticTask(vocab_size=40, num_classes=2, tokens_per_class=5, min_len=5, max_len=6)
        classes, distractors = task.groups()
        assert task.label_of(classes[0][:3]) == 0
        assert task.label_of([classes[1][0], classes[0][0], distractors[0]]) == 0   # tie -> lower id
        assert task.label_of([classes[1][0], classes[1][1], classes[0][0]]) == 1
        with pytest.raises(TaskError):
            task.label_of(distractors[:3])

    def test_every_sequence_labelled_by_rule(self, small_task, small_splits):
        for ds in small_splits.values():
            for seq, y in zip(ds.sequences, ds.labels):
                assert small_task.label_of(seq) == y
                assert small_task.min_len <= len(seq) <= small_task.max_len

    def test_regeneration_is_identical(self, small_task):
        a = generate_splits(small_task, 50, 20, 20)
        b = generate_splits(small_task, 50, 20, 20)
        for name in a:
            assert a[name].sequences == b[name].sequences
            assert np.array_equal(a[name].labels, b[name].labels)

    def test_eval_splits_exclude_train_duplicates(self, small_splits):
        train = {tuple(s) for s in small_splits["train"].sequences}
        assert not any(tuple(s) in train for s in small_splits["dev"].sequences)
        assert not any(tuple(s) in train for s in small_splits["test"].sequences)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_labels_uniform_within_five_percent(self, seed):
        sp = generate_splits(SyntheticTask(seed=seed), 10_000, 1000, 1000)
        for ds in sp.values():
            freq = np.bincount(ds.labels, minlength=4) / len(ds)
            assert np.all(np.abs(freq / 0.25 - 1) <= 0.05)

    def test_learnable_by_bag_of_tokens(self):
        task = SyntheticTask(seed=2)
        sp = generate_splits(task, 10_000, 10, 1000)
        vec = CountVectorizer(analyzer=lambda s: [str(t) for t in s])
        clf = LogisticRegression(max_iter=2000).fit(vec.fit_transform(sp["train"].sequences), sp["train"].labels)
        assert clf.score(vec.transform(sp["test"].sequences), sp["test"].labels) >= 0.9

    def test_unknown_keys(self):
        with pytest.raises(ConfigError):
            SyntheticTask.from_dict({"vocab_size": 100, "colour": "red"})

    def test_bad_split_sizes(self, small_task):
        with pytest.raises(TaskError):
            generate_splits(small_task, 0, 1, 1)


class TestFiles:
    def test_gen_data_byte_identical(self, small_task, tmp_path):
        a = gen_data(small_task, 40, 10, 10, tmp_path / "a")
        b = gen_data(small_task, 40, 10, 10, tmp_path / "b")
        for name in a:
            assert a[name].read_bytes() == b[name].read_bytes()

    def test_tsv_round_trip(self, small_task, tmp_path):
        paths = gen_data(small_task, 30, 10, 10, tmp_path)
        ds = read_tsv(paths["train"], small_task.vocabulary())
        orig = generate_splits(small_task, 30, 10, 10)["train"]
        assert ds.sequences == orig.sequences
        assert np.array_equal(ds.labels, orig.labels)
        first = paths["train"].read_text().splitlines()[0]
        label, text = first.split("\t")
        assert int(label) == orig.labels[0] and text.split()[0] == f"t{orig.sequences[0][0]}"

    def test_malformed_tsv(self, small_task, tmp_path):
        bad = tmp_path / "bad.tsv"
        bad.write_text("not-a-label t5 t6\n")
        with pytest.raises(TaskError):
            read_tsv(bad, small_task.vocabulary())


def test_batch_tensors_prefix_cls_and_pad():
    ids, mask = to_batch_tensors([[5, 6], [7]], max_len=4)
    assert ids.tolist() == [[CLS_ID, 5, 6], [CLS_ID, 7, 0]]
    assert mask.tolist() == [[1, 1, 1], [1, 1, 0]]
    ids, _ = to_batch_tensors([[5, 6, 7, 8, 9]], max_len=4)
    assert ids.tolist() == [[CLS_ID, 5, 6, 7]]
