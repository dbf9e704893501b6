import shutil

import pytest

from vmguard.crypto import CustodyAction, hex_digest
from vmguard.errors import BundleNotFound, StoreUnreadable
from vmguard.evidence import (
    EvidenceBundle,
    EvidenceQuery,
    EvidenceStore,
    bundle_intact,
    evidence_list,
    evidence_verify,
    read_index,
)


@pytest.fixture()
def store_copy(three_bundle_store, tmp_path):
    dst = tmp_path / "store"
    shutil.copytree(three_bundle_store, dst)
    return dst


class TestList:
    def test_empty_store(self, tmp_path):
        EvidenceStore(tmp_path / "s")
        assert evidence_list(tmp_path / "s") == []

    def test_all_sorted(self, three_bundle_store):
        rows = evidence_list(three_bundle_store)
        assert len(rows) == 3
        assert [(r.tick, r.node_id) for r in rows] == sorted((r.tick, r.node_id) for r in rows)

    def test_filter_node(self, three_bundle_store):
        rows = evidence_list(three_bundle_store, EvidenceQuery(node_id="n1"))
        assert len(rows) == 2 and {r.node_id for r in rows} == {"n1"}

    def test_filter_ticks(self, three_bundle_store):
        rows = evidence_list(three_bundle_store)
        mid = rows[1].tick
        assert evidence_list(three_bundle_store, EvidenceQuery(tick_from=mid, tick_to=mid)) == [rows[1]]
        assert evidence_list(three_bundle_store, EvidenceQuery(tick_to=mid - 1)) == [rows[0]]

    def test_corrupted_index_line(self, store_copy):
        index = store_copy / "index.tsv"
        lines = index.read_text().splitlines()
        lines[1] = "garbage"
        index.write_text("\n".join(lines) + "\n")
        with pytest.raises(StoreUnreadable, match="line 2"):
            evidence_list(store_copy)

    def test_missing_directory(self, tmp_path):
        with pytest.raises(StoreUnreadable):
            evidence_list(tmp_path / "nope")


class TestVerify:
    def test_untouched_bundles_pass(self, three_bundle_store):
        for row in evidence_list(three_bundle_store):
            report = evidence_verify(three_bundle_store, row.hash)
            assert report.ok
            names = [c.name for c in report.checks]
            assert names[:2] == ["content_hash", "snapshot_hash"]
            assert any("Stored:server" in n for n in names)

    def test_flipped_byte(self, store_copy):
        row = evidence_list(store_copy)[0]
        path = store_copy / "bundles" / row.hash
        data = bytearray(path.read_bytes())
        data[len(data) // 2] ^= 0x01
        path.write_bytes(bytes(data))
        report = evidence_verify(store_copy, row.hash)
        assert not report.ok
        assert [(c.name, c.passed) for c in report.checks] == [("content_hash", False), ("custody_chain", None)]

    def test_unknown_hash(self, three_bundle_store):
        with pytest.raises(BundleNotFound):
            evidence_verify(three_bundle_store, "0" * 64)

    def test_path_traversal_refused(self, three_bundle_store):
        with pytest.raises(BundleNotFound):
            evidence_verify(three_bundle_store, "../index.tsv")

    def test_custody_order(self, three_bundle_store):
        row = evidence_list(three_bundle_store)[0]
        bundle = EvidenceBundle.from_bytes((three_bundle_store / "bundles" / row.hash).read_bytes())
        assert [r.action for r in bundle.custody] == [
            CustodyAction.SNAPSHOTTED, CustodyAction.TRANSFERRED, CustodyAction.STORED]
        assert [r.actor for r in bundle.custody] == [f"node:{row.node_id}"] * 2 + ["server"]


class TestStore:
    def test_reopen_keeps_everything(self, store_copy):
        before = read_index(store_copy)
        store = EvidenceStore(store_copy)
        assert store.entries == before
        for e in before:
            assert hex_digest(store.get_bytes(e.hash)) == e.hash

    def test_put_is_idempotent(self, store_copy):
        store = EvidenceStore(store_copy)
        bundle = store.get(store.entries[0].hash)
        assert store.put(bundle) == store.entries[0].hash
        assert len(store) == 3

    def test_orphan_reindexed(self, store_copy):
        # simulate a crash after the bundle rename but before the index rename
        index = store_copy / "index.tsv"
        lines = index.read_text().splitlines(keepends=True)
        index.write_text("".join(lines[:-1]))
        store = EvidenceStore(store_copy)
        assert len(store) == 3
        assert len(read_index(store_copy)) == 3

    def test_mismatched_orphan_ignored(self, store_copy):
        (store_copy / "bundles" / ("ab" * 32)).write_bytes(b"{}")
        assert len(EvidenceStore(store_copy)) == 3

    def test_temp_files_ignored(self, store_copy):
        (store_copy / "bundles" / ".partial.123").write_bytes(b"half a bundle")
        assert len(EvidenceStore(store_copy)) == 3

    def test_bundles_verify_against_trust_root(self, three_bundle_store):
        store = EvidenceStore(three_bundle_store)
        for e in store.entries:
            assert bundle_intact(store.get(e.hash), store.trust_root)
