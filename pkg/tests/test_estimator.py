import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from fedprompt import FedPromptClassifier
from fedprompt.data import DatasetSpec, DomainTransform, auto_attribute_map, make_synthetic_dataset


def blob_problem(n_classes=4, train_per_class=8, test_per_class=4, seed=0):
    pool, mapping = auto_attribute_map(n_classes, pool_size=6, attrs_per_class=2, seed=seed)
    spec = DatasetSpec(
        samples_per_class=train_per_class,
        eval_per_class=test_per_class,
        image_size=(8, 8),
        attribute_pool=pool,
        class_attribute_map=mapping,
        domain_transforms=(DomainTransform("identity", 1.0, 0.0),),
        noise_std=0.05,
        seed=seed,
    )
    ds = make_synthetic_dataset(spec)
    def collect(source):
        xs, ys = [], []
        for label, name in enumerate(ds.class_names):
            stack = source(("identity", name))
            xs.append(stack.reshape(stack.shape[0], -1))
            ys.extend([label] * stack.shape[0])
        return np.concatenate(xs), np.asarray(ys)
    X_train, y_train = collect(ds.train.__getitem__)
    X_test, y_test = collect(ds.eval.__getitem__)
    return X_train, y_train, X_test, y_test


def small_estimator(**over):
    values = dict(n_clients=2, rounds=4, local_iters=4, batch_size=8,
                  lr=0.05, alpha=0.5, tau=0.05, embed_dim=16, text_dim=8,
                  depth=1, heads=2, patch_grid=2, prompt_len=2, random_state=3)
    values.update(over)
    return FedPromptClassifier(**values)


def test_fit_predict_above_chance():
    X_train, y_train, X_test, y_test = blob_problem()
    clf = small_estimator().fit(X_train, y_train)
    acc = clf.score(X_test, y_test)
    assert acc > 0.4, acc  # 4 classes, chance 0.25


def test_predict_shapes_and_labels():
    X_train, y_train, X_test, _ = blob_problem()
    clf = small_estimator(rounds=1).fit(X_train, y_train)
    preds = clf.predict(X_test)
    assert preds.shape == (X_test.shape[0],)
    assert set(preds) <= set(np.unique(y_train))
    proba = clf.predict_proba(X_test[:5])
    assert proba.shape == (5, 4)
    np.testing.assert_allclose(proba.sum(axis=1), np.ones(5), atol=1e-5)


def test_deterministic_per_random_state():
    X_train, y_train, X_test, _ = blob_problem()
    p1 = small_estimator(rounds=2).fit(X_train, y_train).predict(X_test)
    p2 = small_estimator(rounds=2).fit(X_train, y_train).predict(X_test)
    np.testing.assert_array_equal(p1, p2)


def test_string_labels_round_trip():
    X_train, y_train, X_test, _ = blob_problem()
    names = np.array(["ant", "bee", "cat", "dog"])
    clf = small_estimator(rounds=1).fit(X_train, names[y_train])
    preds = clf.predict(X_test[:6])
    assert set(preds) <= set(names)


def test_sklearn_clone_and_get_params():
    clf = small_estimator()
    params = clf.get_params()
    assert params["rounds"] == 4
    twin = clone(clf)
    assert twin.get_params() == params
    clf.set_params(rounds=9)
    assert clf.get_params()["rounds"] == 9


def test_unfitted_predict_raises():
    with pytest.raises(NotFittedError):
        small_estimator().predict(np.zeros((2, 64)))


def test_bad_image_shape_rejected():
    X = np.zeros((4, 60))  # not square, no image_shape given
    with pytest.raises(ValueError, match="image_shape"):
        small_estimator().fit(X, [0, 0, 1, 1])


def test_explicit_image_shape():
    X_train, y_train, X_test, _ = blob_problem()
    clf = small_estimator(rounds=1, image_shape=(8, 8)).fit(X_train, y_train)
    assert clf.predict(X_test[:2]).shape == (2,)


def test_shots_subsampling():
    X_train, y_train, _, _ = blob_problem(train_per_class=8)
    clf = small_estimator(rounds=1, shots=3).fit(X_train, y_train)
    for record in [clf]:
        pass
    assert clf.server_.round == 1


def test_custom_class_attributes():
    X_train, y_train, X_test, _ = blob_problem()
    attrs = {c: [f"feature {c}", "shared texture"] for c in np.unique(y_train)}
    clf = small_estimator(rounds=1, class_attributes=attrs).fit(X_train, y_train)
    assert clf.predict(X_test[:2]).shape == (2,)
    with pytest.raises(ValueError, match="missing"):
        small_estimator(class_attributes={0: ["x"]}).fit(X_train, y_train)
