import numpy as np
import pytest

from xspec import voting
from xspec.clustering import NO_CLUSTER, ClusterParams, agglomerate
from xspec.errors import EmptyClusterError, NoNegativeAvailableError, ShapeMismatchError
from xspec.voting import Association, associate_epoch, mine_triplets, vote


def _state_from_assignment(assignment, dim=2, seed=0):
    """Build a ClusterState whose partition equals the given labels by
    placing each cluster's points in a tight, well-separated blob."""
    r = np.random.default_rng(seed)
    assignment = np.asarray(assignment)
    desc = np.zeros((len(assignment), dim))
    for k in np.unique(assignment):
        rows = np.flatnonzero(assignment == k)
        center = r.normal(scale=100.0, size=dim)
        desc[rows] = center + 0.001 * r.normal(size=(len(rows), dim))
    state = agglomerate(desc, ClusterParams(target_clusters=len(np.unique(assignment))))
    # agglomerate relabels by smallest member; map to requested labels
    assert len(np.unique(state.assignment)) == len(np.unique(assignment))
    return state, desc


# --- the vote rule, case by case -------------------------------------------

def test_vote_unanimous():
    d = np.array([[0.1, 5.0, 5.0], [0.2, 6.0, 6.0]])
    winner, count, total = vote(d, np.array([3, 8, 9]))
    assert (winner, count, total) == (3, 2, 2)


def test_vote_majority_accepted():
    # 2 of 3 votes for label 1
    d = np.array([[0.1, 9.0], [0.2, 9.0], [9.0, 0.1]])
    winner, count, total = vote(d, np.array([1, 2]))
    assert (winner, count, total) == (1, 2, 3)


def test_vote_exact_half_accepted():
    # 2 of 4 for the modal label, other two split: 2*2 >= 4 passes
    d = np.array(
        [[0.1, 9.0, 9.0], [0.1, 9.0, 9.0], [9.0, 0.1, 9.0], [9.0, 9.0, 0.1]]
    )
    winner, count, total = vote(d, np.array([5, 6, 7]))
    assert (winner, count, total) == (5, 2, 4)


def test_vote_sub_majority_rejected():
    # 2 of 5 is the mode but below half
    d = np.array(
        [
            [0.1, 9.0, 9.0, 9.0],
            [9.0, 0.1, 9.0, 9.0],
            [9.0, 9.0, 0.1, 9.0],
            [9.0, 9.0, 9.0, 0.1],
            [0.2, 9.0, 9.0, 9.0],
        ]
    )
    winner, count, total = vote(d, np.array([1, 2, 3, 4]))
    assert winner is None and count == 2 and total == 5


def test_vote_modal_tie_rejected():
    d = np.array([[0.1, 9.0], [9.0, 0.1]])
    winner, count, total = vote(d, np.array([4, 6]))
    assert winner is None and count == 1 and total == 2


def test_vote_argmin_tie_takes_first_column():
    d = np.array([[1.0, 1.0, 2.0]])
    winner, _, _ = vote(d, np.array([7, 3, 5]))
    assert winner == 7


def test_vote_empty_block_rejected():
    with pytest.raises(EmptyClusterError):
        vote(np.zeros((0, 3)), np.array([1, 2, 3]))
    with pytest.raises(ShapeMismatchError):
        vote(np.zeros((2, 3)), np.array([1, 2]))


# --- association constructor enforces the bound -----------------------------

def test_association_rejects_sub_majority():
    with pytest.raises(ShapeMismatchError):
        Association(rgb_cluster=0, ir_cluster=1, votes_for_winner=2, votes_total=5, epoch=0)
    with pytest.raises(ShapeMismatchError):
        Association(rgb_cluster=0, ir_cluster=1, votes_for_winner=0, votes_total=0, epoch=0)
    a = Association(rgb_cluster=0, ir_cluster=1, votes_for_winner=3, votes_total=5, epoch=2)
    assert a.epoch == 2


# --- epoch-level association ---------------------------------------------------

def _two_domain_fixture(n_ids=4, per=5, seed=0):
    """Matched RGB/IR blobs: identity k sits near center_k in both domains."""
    r = np.random.default_rng(seed)
    centers = r.normal(scale=50.0, size=(n_ids, 3))
    rgb = np.concatenate([centers[k] + 0.01 * r.normal(size=(per, 3)) for k in range(n_ids)])
    ir = np.concatenate([centers[k] + 0.01 * r.normal(size=(per, 3)) for k in range(n_ids)])
    truth = np.repeat(np.arange(n_ids), per)
    rgb_state = agglomerate(rgb, ClusterParams(target_clusters=n_ids))
    ir_state = agglomerate(ir, ClusterParams(target_clusters=n_ids))
    return rgb_state, ir_state, rgb, ir, truth


def test_associate_epoch_all_correct_on_clean_data():
    rgb_state, ir_state, rgb, ir, truth = _two_domain_fixture()
    rng = np.random.default_rng(1)
    assocs = associate_epoch(rgb_state, ir_state, rgb, ir, rng, epoch=3)
    assert len(assocs) == 4
    for a in assocs:
        assert a.epoch == 3
        assert a.votes_for_winner == a.votes_total == 5
        # correct means: the two clusters cover the same identity
        rgb_ids = set(truth[rgb_state.members[a.rgb_cluster]])
        ir_ids = set(truth[ir_state.members[a.ir_cluster]])
        assert rgb_ids == ir_ids


def test_associate_epoch_injective_on_ir_side():
    rgb_state, ir_state, rgb, ir, _ = _two_domain_fixture(n_ids=5, per=3, seed=4)
    assocs = associate_epoch(rgb_state, ir_state, rgb, ir, np.random.default_rng(0))
    ir_clusters = [a.ir_cluster for a in assocs]
    assert len(ir_clusters) == len(set(ir_clusters))
    rgb_clusters = [a.rgb_cluster for a in assocs]
    assert len(rgb_clusters) == len(set(rgb_clusters))


def test_associate_epoch_votes_total_equals_cluster_size():
    rgb_state, ir_state, rgb, ir, _ = _two_domain_fixture(n_ids=3, per=7, seed=2)
    assocs = associate_epoch(rgb_state, ir_state, rgb, ir, np.random.default_rng(0))
    for a in assocs:
        assert a.votes_total == len(rgb_state.members[a.rgb_cluster])


def test_associate_epoch_claim_conflict_first_wins():
    # two RGB clusters whose members all point into the same IR cluster:
    # whichever is visited first claims it, the other gets nothing
    rgb = np.array([[0.0, 0.0], [0.1, 0.0], [10.0, 0.0], [10.1, 0.0]])
    ir = np.array([[0.05, 0.0], [5.0, 50.0]])
    rgb_state = agglomerate(rgb, ClusterParams(target_clusters=2))
    ir_state = agglomerate(ir, ClusterParams(target_clusters=2))
    # both RGB blobs are closer to ir[0] than ir[1]
    assocs = associate_epoch(rgb_state, ir_state, rgb, ir, np.random.default_rng(0))
    assert len(assocs) == 1
    assert assocs[0].ir_cluster == ir_state.assignment[0]


def test_associate_epoch_skips_ineligible_rgb():
    rgb_state, ir_state, rgb, ir, _ = _two_domain_fixture(n_ids=3, per=4, seed=5)
    gated = dict.fromkeys((int(c) for c in rgb_state.cluster_ids), False)
    gated[int(rgb_state.cluster_ids[0])] = True
    import dataclasses

    eligible = np.array([gated[int(c)] for c in rgb_state.cluster_ids])
    rgb_state = dataclasses.replace(rgb_state, eligible=eligible)
    assocs = associate_epoch(rgb_state, ir_state, rgb, ir, np.random.default_rng(0))
    assert len(assocs) == 1
    assert assocs[0].rgb_cluster == int(rgb_state.cluster_ids[0])


def test_associate_epoch_unassigned_ir_excluded():
    rgb = np.array([[0.0, 0.0], [0.1, 0.0]])
    ir = np.array([[0.05, 0.0], [30.0, 0.0], [30.1, 0.0]])
    rgb_state = agglomerate(rgb, ClusterParams(target_clusters=1))
    ir_state = agglomerate(ir, ClusterParams(target_clusters=2))
    # strip the IR sample nearest to the RGB blob out of the assignment
    import dataclasses

    a = ir_state.assignment.copy()
    dropped = a[0]
    a[0] = NO_CLUSTER
    from xspec.clustering import _rebuild

    ids, mem, cents, elig = _rebuild(a, ir)
    ir_state = dataclasses.replace(
        ir_state, assignment=a, cluster_ids=ids, members=mem, centroids=cents, eligible=elig
    )
    assocs = associate_epoch(rgb_state, ir_state, rgb, ir, np.random.default_rng(0))
    assert all(x.ir_cluster != dropped for x in assocs)


def test_associate_epoch_no_assigned_ir_returns_empty():
    rgb = np.array([[0.0, 0.0], [0.1, 0.0]])
    rgb_state = agglomerate(rgb, ClusterParams(target_clusters=1))
    ir = np.array([[1.0, 1.0]])
    ir_state = agglomerate(ir, ClusterParams(target_clusters=1))
    import dataclasses

    blank = np.full(1, NO_CLUSTER)
    from xspec.clustering import _rebuild

    ids, mem, cents, elig = _rebuild(blank, ir)
    ir_state = dataclasses.replace(
        ir_state, assignment=blank, cluster_ids=ids, members=mem, centroids=cents, eligible=elig
    )
    assert associate_epoch(rgb_state, ir_state, rgb, ir, np.random.default_rng(0)) == []


def test_associate_epoch_deterministic_given_rng_seed():
    rgb_state, ir_state, rgb, ir, _ = _two_domain_fixture(n_ids=4, per=4, seed=7)
    a1 = associate_epoch(rgb_state, ir_state, rgb, ir, np.random.default_rng(42))
    a2 = associate_epoch(rgb_state, ir_state, rgb, ir, np.random.default_rng(42))
    assert a1 == a2


# --- triplet mining -----------------------------------------------------------

def test_mine_triplets_exhaustive_when_budget_covers_combos():
    rgb_state, ir_state, rgb, ir, _ = _two_domain_fixture(n_ids=3, per=3, seed=1)
    assocs = associate_epoch(rgb_state, ir_state, rgb, ir, np.random.default_rng(0))
    trips = mine_triplets(assocs, rgb_state, ir_state, rgb, np.random.default_rng(0), per_assoc=100)
    assert len(trips) == sum(
        len(rgb_state.members[a.rgb_cluster]) * len(ir_state.members[a.ir_cluster])
        for a in assocs
    )
    combos = {(t.anchor, t.positive) for t in trips}
    assert len(combos) == len(trips)  # without replacement


def test_mine_triplets_budget_limits_count():
    rgb_state, ir_state, rgb, ir, _ = _two_domain_fixture(n_ids=3, per=4, seed=2)
    assocs = associate_epoch(rgb_state, ir_state, rgb, ir, np.random.default_rng(0))
    trips = mine_triplets(assocs, rgb_state, ir_state, rgb, np.random.default_rng(0), per_assoc=5)
    assert len(trips) == 5 * len(assocs)


def test_mine_triplets_members_come_from_their_clusters():
    rgb_state, ir_state, rgb, ir, _ = _two_domain_fixture(n_ids=4, per=3, seed=3)
    assocs = associate_epoch(rgb_state, ir_state, rgb, ir, np.random.default_rng(0))
    trips = mine_triplets(assocs, rgb_state, ir_state, rgb, np.random.default_rng(0), per_assoc=4)
    for t in trips:
        assert rgb_state.assignment[t.anchor] == t.rgb_cluster
        assert ir_state.assignment[t.positive] == t.ir_cluster
        assert rgb_state.assignment[t.negative] != t.rgb_cluster


def test_mine_triplets_negative_is_hardest_of_nearest_cluster():
    # geometry chosen so the nearest other RGB cluster and its closest
    # member are unambiguous
    rgb = np.array(
        [[0.0, 0.0], [0.2, 0.0], [3.0, 0.0], [3.4, 0.0], [50.0, 0.0], [50.2, 0.0]]
    )
    ir = np.array([[0.1, 0.0], [3.2, 0.0], [50.1, 0.0]])
    rgb_state = agglomerate(rgb, ClusterParams(target_clusters=3))
    ir_state = agglomerate(ir, ClusterParams(target_clusters=3))
    assocs = associate_epoch(rgb_state, ir_state, rgb, ir, np.random.default_rng(0))
    by_rgb = {a.rgb_cluster: a for a in assocs}
    cid0 = rgb_state.assignment[0]
    trips = mine_triplets([by_rgb[cid0]], rgb_state, ir_state, rgb, np.random.default_rng(0), per_assoc=10)
    # nearest other cluster to {0,1} is {2,3}; hardest member for anchor 0 is 2
    for t in trips:
        assert t.negative == 2 if t.anchor == 0 else t.negative in (2, 3)
        if t.anchor == 1:
            assert t.negative == 2


def test_mine_triplets_single_cluster_rejected():
    rgb = np.array([[0.0, 0.0], [0.1, 0.0]])
    ir = np.array([[0.05, 0.0]])
    rgb_state = agglomerate(rgb, ClusterParams(target_clusters=1))
    ir_state = agglomerate(ir, ClusterParams(target_clusters=1))
    assocs = associate_epoch(rgb_state, ir_state, rgb, ir, np.random.default_rng(0))
    with pytest.raises(NoNegativeAvailableError):
        mine_triplets(assocs, rgb_state, ir_state, rgb, np.random.default_rng(0))


def test_mine_triplets_deterministic():
    rgb_state, ir_state, rgb, ir, _ = _two_domain_fixture(n_ids=4, per=5, seed=6)
    assocs = associate_epoch(rgb_state, ir_state, rgb, ir, np.random.default_rng(0))
    t1 = mine_triplets(assocs, rgb_state, ir_state, rgb, np.random.default_rng(9), per_assoc=6)
    t2 = mine_triplets(assocs, rgb_state, ir_state, rgb, np.random.default_rng(9), per_assoc=6)
    assert t1 == t2


# --- csv ------------------------------------------------------------------------

def test_export_associations_csv(tmp_path):
    assocs = [
        Association(rgb_cluster=0, ir_cluster=2, votes_for_winner=4, votes_total=5, epoch=0),
        Association(rgb_cluster=1, ir_cluster=0, votes_for_winner=3, votes_total=3, epoch=0),
    ]
    path = tmp_path / "a.csv"
    voting.export_associations_csv(assocs, path, correct=[True, False])
    assert path.read_text() == (
        "rgb_cluster,ir_cluster,votes,total,correct\n0,2,4,5,1\n1,0,3,3,0\n"
    )
    voting.export_associations_csv(assocs, path)
    assert path.read_text().splitlines()[1] == "0,2,4,5,"
    with pytest.raises(ShapeMismatchError):
        voting.export_associations_csv(assocs, path, correct=[True])
