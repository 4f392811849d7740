import pytest

from emdsplat import synth

SMALL = dict(n_frames=6, width=32, height=24, focal=28.0, ground_grid=(10, 6), backdrop_grid=(10, 6))


@pytest.fixture(scope="session")
def small_dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("small_ds")
    synth.write_dataset(synth.generate_scene(0, synth.ScenarioConfig(**SMALL)), root)
    return root


@pytest.fixture(scope="session")
def small_dataset(small_dataset_dir):
    return synth.read_dataset(small_dataset_dir)


@pytest.fixture(scope="session")
def supervised_dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("sup_ds")
    cfg = synth.ScenarioConfig.preset("toy-supervised", n_frames=6, width=32, height=24, focal=28.0)
    synth.write_dataset(synth.generate_scene(1, cfg), root)
    return root


@pytest.fixture(scope="session")
def static_dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("static_ds")
    synth.write_dataset(synth.generate_scene(2, synth.ScenarioConfig.preset("static", **SMALL)), root)
    return root
