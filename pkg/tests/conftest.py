import pytest
import torch

from linedraw.backbones import make_stub_backbones
from linedraw.data import FixtureSpec, synth_fixture
from linedraw.depth_pretrain import PretrainConfig, cache_pseudo_depth, load_photo_depth, pretrain_depth_decoder

FIXTURE_SIZE = 64


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def fixture_dir(tmp_path_factory):
    return synth_fixture(FixtureSpec(n_images=64, seed=7, size=FIXTURE_SIZE), tmp_path_factory.mktemp("fixture"))


@pytest.fixture(scope="session")
def stubs(fixture_dir):
    return make_stub_backbones(0, fixture_dir)


@pytest.fixture(scope="session")
def depth_cache(fixture_dir, stubs, tmp_path_factory):
    cache = tmp_path_factory.mktemp("cache")
    cache_pseudo_depth(fixture_dir / "photos", stubs[2], cache)
    return cache


@pytest.fixture(scope="session")
def photo_depth(fixture_dir, depth_cache):
    return load_photo_depth(fixture_dir / "photos", depth_cache, FIXTURE_SIZE)


@pytest.fixture(scope="session")
def pretrained(photo_depth, stubs, tmp_path_factory):
    """Decoder pretrained for 200 steps on the fixture; (decoder, losses, saved dir)."""
    from linedraw.depth_pretrain import save_decoder

    images, depths, _ = photo_depth
    decoder, losses = pretrain_depth_decoder(
        images, depths, stubs[0], PretrainConfig(max_steps=200, image_size=FIXTURE_SIZE, seed=0)
    )
    out = save_decoder(decoder, tmp_path_factory.mktemp("geom"))
    return decoder, losses, out


# ---------------------------------------------------------------- acceptance

ACCEPTANCE_RESULTS: list[tuple[int, str, bool, str, float]] = []


@pytest.fixture
def acceptance_log():
    return ACCEPTANCE_RESULTS


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n, title, ok, detail, seconds in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {title} ({seconds:.1f}s) {detail}")
