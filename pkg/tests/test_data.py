import numpy as np
import pytest

from codo.data import (
    SHARD_MAGIC,
    CorpusViewStream,
    ShardFormatError,
    ShardViewSource,
    prefetch,
    read_shard,
    write_shard,
)


@pytest.fixture
def viewsets(tiny_corpus):
    stream = CorpusViewStream(tiny_corpus, n_keys=3, seed=0)
    return stream.batch(1, 6)


class TestStream:
    def test_batch_is_pure_function_of_step(self, tiny_corpus):
        a = CorpusViewStream(tiny_corpus, seed=4).batch(7, 5)
        b = CorpusViewStream(tiny_corpus, seed=4)
        b.batch(1, 5)
        b = b.batch(7, 5)
        for x, y in zip(a, b):
            assert x.foreground_id == y.foreground_id
            for vx, vy in zip(x.views, y.views):
                assert np.array_equal(vx.image, vy.image) and vx.box == vy.box

    def test_epoch_visits_every_image_once(self, tiny_corpus):
        stream = CorpusViewStream(tiny_corpus, seed=0)
        n = len(stream)
        ids = [vs.foreground_id for step in range(1, n // 8 + 1) for vs in stream.batch(step, 8)]
        assert sorted(ids) == sorted(f"img{i}" for i in range(n))

    def test_query_and_key_pools(self, tiny_corpus):
        stream = CorpusViewStream(tiny_corpus, query_pools=["smooth"], key_pools=["clutter"], allow_pool_mismatch=True)
        for vs in stream.batch(1, 4):
            assert vs.query.pool_id == "smooth" and all(k.pool_id == "clutter" for k in vs.keys)

    def test_mismatch_needs_flag(self, tiny_corpus):
        stream = CorpusViewStream(tiny_corpus, query_pools=["smooth"], key_pools=["clutter"])
        with pytest.raises(ValueError):
            stream.batch(1, 2)

    def test_step_zero_rejected(self, tiny_corpus):
        with pytest.raises(ValueError, match="1-based"):
            CorpusViewStream(tiny_corpus, seed=0).batch(0, 2)


class TestShards:
    def test_round_trip(self, viewsets, tmp_path):
        path = write_shard(tmp_path / "a.views", viewsets, 64)
        header, back = read_shard(path)
        assert header["n_keys"] == 3 and header["count"] == len(viewsets)
        for a, b in zip(viewsets, back):
            assert a.foreground_id == b.foreground_id
            for va, vb in zip(a.views, b.views):
                assert np.array_equal(va.image, vb.image)
                assert va.box == vb.box and va.paste_box == vb.paste_box
                assert va.pool_id == vb.pool_id and va.crop_digest == vb.crop_digest

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.views").write_bytes(b"NOTVIEWS" + b"\0" * 16)
        with pytest.raises(ShardFormatError):
            read_shard(tmp_path / "x.views")

    def test_truncated(self, viewsets, tmp_path):
        path = write_shard(tmp_path / "a.views", viewsets, 64)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(ShardFormatError):
            read_shard(path)

    def test_magic_prefix(self, viewsets, tmp_path):
        assert write_shard(tmp_path / "a.views", viewsets, 64).read_bytes().startswith(SHARD_MAGIC)

    def test_wrong_image_size(self, viewsets, tmp_path):
        with pytest.raises(ValueError):
            write_shard(tmp_path / "a.views", viewsets, 32)

    def test_source(self, viewsets, tmp_path):
        write_shard(tmp_path / "a.views", viewsets[:4], 64)
        write_shard(tmp_path / "b.views", viewsets[4:], 64)
        src = ShardViewSource(tmp_path, seed=1)
        assert len(src) == 6 and src.n_keys == 3 and src.steps_per_epoch(4) == 2
        first_epoch = src.batch(1, 3) + src.batch(2, 3)
        assert sorted(vs.foreground_id for vs in first_epoch) == sorted(vs.foreground_id for vs in viewsets)

    def test_empty_directory(self, tmp_path):
        with pytest.raises(ShardFormatError):
            ShardViewSource(tmp_path)


def test_prefetch_preserves_order(tiny_corpus):
    stream = CorpusViewStream(tiny_corpus, seed=0)
    got = [(step, [vs.foreground_id for vs in batch]) for step, batch in prefetch(stream, range(3, 8), 4)]
    assert [s for s, _ in got] == [3, 4, 5, 6, 7]
    assert got[2][1] == [vs.foreground_id for vs in stream.batch(5, 4)]
