from __future__ import annotations

import random
import threading
from itertools import permutations

import pytest

from fcac.envelopes import ACTIVE, EXPIRED, PENDING, EnvelopeBook
from fcac.errors import EnvelopeError

from .conftest import HUB_ID, NOW, admin


def orgs(n):
    return [f"org-{i}" for i in range(n)]


def approve(book, org, now=NOW):
    code = book.verify_start(admin(org), now).code
    sess = book.session_claim(HUB_ID, code, now)
    return book.bind_approve(HUB_ID, sess.session_id, now)


def quorum_oracle(k: int, approvals: int) -> str:
    return ACTIVE if approvals >= k else PENDING


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_quorum_exhaustive_all_orders(n):
    for k in range(1, n + 1):
        for order in permutations(orgs(n)):
            book = EnvelopeBook(rng=random.Random(k))
            env = book.bind_init(HUB_ID, orgs(n), k, n, NOW)
            assert env.state == PENDING
            for i, org in enumerate(order[:k], start=1):
                env = approve(book, org)
                assert env.state == quorum_oracle(k, i)
            for org in order[k:]:
                with pytest.raises(EnvelopeError) as exc:
                    approve(book, org)
                assert exc.value.code == "no_pending_session"


@pytest.mark.parametrize("k,n,parts", [(0, 2, 2), (3, 2, 2), (2, 3, 2), (True, 1, 1)])
def test_bad_quorum(k, n, parts):
    with pytest.raises(EnvelopeError) as exc:
        EnvelopeBook().bind_init(HUB_ID, orgs(parts), k, n, NOW)
    assert exc.value.code == "bad_quorum"


def test_role_checks():
    book = EnvelopeBook()
    with pytest.raises(EnvelopeError) as exc:
        book.bind_init(admin("org-0"), orgs(2), 2, 2, NOW)
    assert exc.value.code == "identity_not_hub"
    book.bind_init(HUB_ID, orgs(2), 2, 2, NOW)
    with pytest.raises(EnvelopeError) as exc:
        book.verify_start(HUB_ID, NOW)
    assert exc.value.code == "identity_not_admin"
    code = book.verify_start(admin("org-0"), NOW).code
    with pytest.raises(EnvelopeError) as exc:
        book.session_claim(admin("org-0"), code, NOW)
    assert exc.value.code == "identity_not_hub"


def test_code_rules():
    book = EnvelopeBook(code_ttl=600)
    book.bind_init(HUB_ID, orgs(2), 2, 2, NOW)
    code = book.verify_start(admin("org-0"), NOW).code
    assert len(code) == 6 and code.isdigit()
    with pytest.raises(EnvelopeError) as exc:
        book.session_claim(HUB_ID, "abcdef", NOW)
    assert exc.value.code == "invalid_code"
    sess = book.session_claim(HUB_ID, code, NOW)
    with pytest.raises(EnvelopeError) as exc:
        book.session_claim(HUB_ID, code, NOW)
    assert exc.value.code == "already_claimed"
    book.bind_approve(HUB_ID, sess.session_id, NOW)
    with pytest.raises(EnvelopeError) as exc:
        book.bind_approve(HUB_ID, sess.session_id, NOW)
    assert exc.value.code == "duplicate_approval"
    late = book.verify_start(admin("org-1"), NOW).code
    with pytest.raises(EnvelopeError) as exc:
        book.session_claim(HUB_ID, late, NOW + 601)
    assert exc.value.code == "invalid_code"


def test_concurrent_claim_single_winner():
    book = EnvelopeBook()
    book.bind_init(HUB_ID, orgs(1), 1, 1, NOW)
    code = book.verify_start(admin("org-0"), NOW).code
    results, barrier = [], threading.Barrier(12)

    def worker():
        barrier.wait()
        try:
            book.session_claim(HUB_ID, code, NOW)
            results.append("ok")
        except EnvelopeError as exc:
            results.append(exc.code)

    threads = [threading.Thread(target=worker) for _ in range(12)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert results.count("ok") == 1
    assert set(results) == {"ok", "already_claimed"}


def test_expiry_and_window():
    book = EnvelopeBook()
    env = book.bind_init(HUB_ID, orgs(1), 1, 1, NOW, validity=(NOW + 100, NOW + 200))
    approve(book, "org-0")
    assert book.envelope_status(env.envelope_id, NOW).state == PENDING
    assert book.envelope_status(env.envelope_id, NOW + 150).active_at(NOW + 150)
    assert book.envelope_status(env.envelope_id, NOW + 201).state == EXPIRED
    # expiry is persisted and never regresses
    assert book.get(env.envelope_id).state == EXPIRED
    assert book.envelope_status(env.envelope_id, NOW + 150).state == EXPIRED


def test_expired_pending_cannot_be_approved():
    book = EnvelopeBook()
    env = book.bind_init(HUB_ID, orgs(1), 1, 1, NOW, validity=(NOW, NOW + 10))
    sess = book.session_claim(HUB_ID, book.verify_start(admin("org-0"), NOW).code, NOW)
    with pytest.raises(EnvelopeError) as exc:
        book.bind_approve(HUB_ID, sess.session_id, NOW + 11)
    assert exc.value.code == "envelope_not_pending"
    assert book.get(env.envelope_id).state == PENDING


def test_log_replay(tmp_path):
    log = tmp_path / "env.jsonl"
    book = EnvelopeBook(log, rng=random.Random(5))
    a = book.bind_init(HUB_ID, orgs(2), 2, 2, NOW)
    approve(book, "org-0")
    approve(book, "org-1")
    b = book.bind_init(HUB_ID, orgs(3), 2, 3, NOW)
    approve(book, "org-2")
    again = EnvelopeBook(log)
    for eid in (a.envelope_id, b.envelope_id):
        assert again.get(eid) == book.get(eid)
    assert again.get(a.envelope_id).state == ACTIVE
    assert again.get(b.envelope_id).state == PENDING
    approve(again, "org-1")
    assert again.get(b.envelope_id).state == ACTIVE


def test_seeded_ids_reproducible():
    ids = []
    for _ in range(2):
        book = EnvelopeBook(rng=random.Random(9))
        env = book.bind_init(HUB_ID, orgs(2), 1, 2, NOW)
        ids.append((env.envelope_id, [s.code for s in book.sessions_for(env.envelope_id)]))
    assert ids[0] == ids[1]
