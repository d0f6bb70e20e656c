"""Config round-trips, override plumbing, and CLI smoke runs on a tiny set."""

import hashlib
import os

import pytest

from quadseg import cli, tensor
from quadseg.adaptation import pair_two_way, read_pairs, to_grayscale
from quadseg.config import (
    RunConfig,
    apply_overrides,
    parse_config,
    serialize_config,
)
from quadseg.dataset import (
    image_path,
    iou,
    list_image_ids,
    load_sample,
    source_spec,
    split_target_ids,
    target_spec,
    write_scene_specs,
)
from quadseg.pnm import read_pgm

# ---------------------------------------------------------------------------
# config text round-trip
# ---------------------------------------------------------------------------


def test_config_roundtrip_defaults():
    cfg = RunConfig()
    assert parse_config(serialize_config(cfg)) == cfg


def test_config_roundtrip_modified():
    cfg = RunConfig(lr=3e-4, channels=(4, 8, 16, 32), adversarial=False,
                    temperature=2.5, batch=3)
    again = parse_config(serialize_config(cfg))
    assert again == cfg
    assert serialize_config(again) == serialize_config(cfg)


def test_unknown_config_key_rejected():
    with pytest.raises(ValueError, match="unknown"):
        parse_config("bogus_knob = 1\n")


def test_duplicate_config_key_rejected():
    with pytest.raises(ValueError):
        parse_config("lr = 0.1\nlr = 0.2\n")


def test_partial_text_keeps_base_fields():
    base = RunConfig(batch=7)
    cfg = parse_config("lr = 0.5\n", base=base)
    assert cfg.lr == 0.5 and cfg.batch == 7
    assert cfg.tau == RunConfig().tau


def test_apply_overrides_wins_over_base():
    cfg = apply_overrides(RunConfig(), {"tau": "0.5", "adversarial": "false"})
    assert cfg.tau == 0.5 and cfg.adversarial is False
    with pytest.raises(ValueError):
        apply_overrides(RunConfig(), {"no_such_field": "1"})
    with pytest.raises(ValueError):
        apply_overrides(RunConfig(), {"lr": "banana"})


def test_builder_configs_mirror_run_config():
    cfg = RunConfig()
    enc, dec, disc = cfg.encoder_config(), cfg.decoder_config(), \
        cfg.disc_config()
    assert enc.channels == cfg.channels and enc.heads == cfg.heads
    assert dec.embed_dim == cfg.embed_dim
    assert dec.num_classes == cfg.num_classes
    # the critic scores softmax probability maps, one plane per class
    assert disc.in_channels == cfg.num_classes
    assert disc.channels == cfg.disc_channels


# ---------------------------------------------------------------------------
# thread cap and argument errors
# ---------------------------------------------------------------------------


def test_thread_cap_translates_to_pool_vars():
    env = {"QF_THREADS": "3"}
    cli.apply_thread_cap(env)
    for var in cli._POOL_VARS:
        assert env[var] == "3"


def test_thread_cap_keeps_explicit_settings():
    env = {"QF_THREADS": "8", "OPENBLAS_NUM_THREADS": "1"}
    cli.apply_thread_cap(env)
    assert env["OPENBLAS_NUM_THREADS"] == "1"
    assert env["OMP_NUM_THREADS"] == "8"


def test_thread_cap_rejects_garbage():
    for bad in ("0", "-2", "many"):
        with pytest.raises(ValueError):
            cli.apply_thread_cap({"QF_THREADS": bad})
    cli.apply_thread_cap({})  # unset: no-op


def test_usage_errors_exit_one():
    for argv in ([], ["bogus"], ["adapt", "--data", "x"]):
        with pytest.raises(SystemExit) as ei:
            cli.main(argv)
        assert ei.value.code == 1


def test_malformed_set_flag_exits_one(tmp_path, capsys):
    rc = cli.main(["warmup", "--data", str(tmp_path), "--out",
                   str(tmp_path / "w.ckpt"), "--set", "lr"])
    assert rc == 1
    assert "key=value" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# CLI pipeline on a four-image benchmark
# ---------------------------------------------------------------------------

_TINY = ["--train", "4", "--val", "2", "--seed", "7"]
_FAST = ["--set", "warmup_iterations=4", "--set", "iterations=4",
         "--set", "eval_every=2"]


def _tree_digest(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for name in files:
            path = os.path.join(dirpath, name)
            with open(path, "rb") as fh:
                digest = hashlib.sha256(fh.read()).hexdigest()
            out[os.path.relpath(path, root)] = digest
    return out


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = str(root / "data")
    assert cli.main(["generate", "--out", data] + _TINY) == 0
    return root, data


@pytest.fixture(scope="module")
def chain(workspace):
    root, data = workspace
    paths = {"data": data,
             "pairs": str(root / "pairs.tsv"),
             "wck": str(root / "w.ckpt"),
             "ack": str(root / "a.ckpt"),
             "evdir": str(root / "evaldir"),
             "wlog": str(root / "wlog.csv"),
             "alog": str(root / "alog.csv")}
    assert cli.main(["pair", "--data", data, "--out", paths["pairs"]]) == 0
    assert cli.main(["warmup", "--data", data, "--out", paths["wck"],
                     "--log", paths["wlog"]] + _FAST) == 0
    assert cli.main(["adapt", "--data", data, "--warmup", paths["wck"],
                     "--out", paths["ack"], "--pairs", paths["pairs"],
                     "--log", paths["alog"]] + _FAST) == 0
    assert cli.main(["eval", "--ckpt", paths["ack"], "--data", data,
                     "--out", paths["evdir"]]) == 0
    return paths


def test_generate_layout_and_counts(workspace):
    _, data = workspace
    assert sorted(list_image_ids(data, "source")) == [0, 1, 2, 3]
    train, val = split_target_ids(data)
    assert train == [0, 1, 2, 3] and val == [4, 5]
    ppm = sum(len([f for f in fs if f.endswith(".ppm")])
              for _, _, fs in os.walk(data))
    pgm = sum(len([f for f in fs if f.endswith(".pgm")])
              for _, _, fs in os.walk(data))
    assert ppm == 10 and pgm == 6  # 4+6 images, 4+2 labels


def test_generate_rerun_byte_identical(workspace, tmp_path):
    _, data = workspace
    again = str(tmp_path / "again")
    assert cli.main(["generate", "--out", again] + _TINY) == 0
    assert _tree_digest(again) == _tree_digest(data)


def test_generate_from_spec_file_matches_builtin(workspace, tmp_path):
    _, data = workspace
    spec_file = str(tmp_path / "domains.txt")
    write_scene_specs(spec_file, source_spec(7), target_spec(7))
    out = str(tmp_path / "deep" / "nested" / "data")  # parents created
    assert cli.main(["generate", "--out", out, "--spec", spec_file,
                     "--train", "4", "--val", "2"]) == 0
    assert _tree_digest(out) == _tree_digest(data)


def test_pair_file_round_trips_to_recomputed_pairing(chain):
    data = chain["data"]
    src_ids = list_image_ids(data, "source")
    tgt_ids = split_target_ids(data)[0]
    src_paths = [image_path(data, "source", i) for i in src_ids]
    tgt_paths = [image_path(data, "target", i) for i in tgt_ids]
    loaded = read_pairs(chain["pairs"], src_paths, tgt_paths)
    fresh = pair_two_way(
        [to_grayscale(load_sample(data, "source", i, with_label=False).image)
         for i in src_ids],
        [to_grayscale(load_sample(data, "target", i, with_label=False).image)
         for i in tgt_ids])
    assert loaded.pairs == fresh.pairs
    assert loaded.sims == pytest.approx(fresh.sims, abs=0)
    assert {i for i, _ in loaded.pairs} == set(range(len(src_ids)))
    assert {j for _, j in loaded.pairs} == set(range(len(tgt_ids)))


def test_warmup_emits_checkpoint_and_pseudo_labels(chain):
    assert os.path.exists(chain["wck"])
    plabel_dir = chain["wck"] + ".plabels"
    names = sorted(os.listdir(plabel_dir))
    assert names == ["0000.conf", "0000.pgm", "0001.conf", "0001.pgm",
                     "0002.conf", "0002.pgm", "0003.conf", "0003.pgm"]


def test_log_files_have_contract_header(chain):
    header = "step,l_seg_s,l_seg_t,d_loss,g_loss,lr,target_iou"
    for key in ("wlog", "alog"):
        with open(chain[key]) as fh:
            lines = fh.read().splitlines()
        assert lines[0] == header
        assert len(lines) == 1 + 4  # one row per step


def test_adapt_rerun_byte_identical(chain, tmp_path):
    again = str(tmp_path / "a2.ckpt")
    assert cli.main(["adapt", "--data", chain["data"], "--warmup",
                     chain["wck"], "--out", again, "--pairs",
                     chain["pairs"]] + _FAST) == 0
    for suffix in ("", ".bin"):
        with open(chain["ack"] + suffix, "rb") as fh:
            want = fh.read()
        with open(again + suffix, "rb") as fh:
            assert fh.read() == want


def test_eval_report_matches_mask_recompute(chain):
    with open(os.path.join(chain["evdir"], "report.csv")) as fh:
        lines = fh.read().splitlines()
    assert lines[0] == "id,iou"
    assert lines[-1].startswith("mean,")
    vals = []
    for line in lines[1:-1]:
        sid, val = line.split(",")
        mask = read_pgm(os.path.join(chain["evdir"], "masks",
                                     f"{sid}.pgm")) > 127
        label = load_sample(chain["data"], "target", int(sid),
                            with_label=True).label
        assert abs(iou(mask, label) - float(val)) < 5e-7
        vals.append(float(val))
    assert abs(float(lines[-1].split(",")[1]) - sum(vals) / len(vals)) < 1e-6


def test_eval_never_reads_source_images(chain, tmp_path):
    hidden = str(tmp_path / "source_hidden")
    os.rename(os.path.join(chain["data"], "source"), hidden)
    try:
        rc = cli.main(["eval", "--ckpt", chain["ack"], "--data",
                       chain["data"], "--out", str(tmp_path / "ev")])
    finally:
        os.rename(hidden, os.path.join(chain["data"], "source"))
    assert rc == 0


def test_missing_checkpoint_exits_one(chain, capsys):
    rc = cli.main(["eval", "--ckpt", chain["wck"] + ".nope", "--data",
                   chain["data"], "--out", chain["evdir"]])
    assert rc == 1
    assert "error" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# verification command
# ---------------------------------------------------------------------------


def test_verify_clean_passes(capsys):
    assert cli.main(["verify"]) == 0
    assert capsys.readouterr().out.count("PASS") == 5


def test_verify_injected_fault_caught():
    assert cli.main(["verify", "--inject-fault"]) == 2
    assert tensor._FAULT_INJECTION is False  # switch reset on the way out
