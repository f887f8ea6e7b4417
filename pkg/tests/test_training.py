import hashlib
import json
import zipfile

import numpy as np
import pytest

from multissl import autodiff as ad
from multissl.autodiff import Tensor
from multissl.data import InMemoryDataset, Split, SynthConfig, synth_generate
from multissl.errors import CheckpointError, ConfigError, ContractError
from multissl.heads import ModelBundle
from multissl.losses import LossConfig
from multissl.training import (DownstreamConfig, PretrainConfig,
                               attach_probe_and_train, load_checkpoint, pretrain,
                               save_checkpoint, write_run_log,
                               _bundle_from_checkpoint)

F32 = np.float32


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    cfg = SynthConfig(n_samples=160, n_classes=3, latent_dim=8,
                      modality_dims={"video": 18, "text": 12, "audio": 15},
                      cross_modal_correlation=0.9, label_noise=0.0, seed=0)
    return synth_generate(cfg, tmp_path_factory.mktemp("synth"))


def small_cfg(method="ConCluGen", **over):
    base = dict(method=method, epochs=2, batch_size=16, lr=1e-3,
                representation_dim=16, projection_dim=8, cluster_dim=8,
                clusters=4, queue_batches=4, cluster_start_epoch=0, seed=0,
                loss=LossConfig(method=method))
    base.update(over)
    return PretrainConfig(**base)


def tensor_hash(arrays: dict) -> str:
    digest = hashlib.sha256()
    for name in sorted(arrays):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(arrays[name]).tobytes())
    return digest.hexdigest()


class TestPretrainLoop:
    def test_generative_loss_decreases(self, dataset):
        cfg = small_cfg("Generative", epochs=3, lr=3e-3)
        _, rows = pretrain(cfg, dataset)
        assert rows[-1]["total"] < rows[0]["total"]

    def test_clustering_gated_before_start_epoch(self, dataset):
        cfg = small_cfg("ConCluGen", epochs=1, cluster_start_epoch=2)
        _, rows = pretrain(cfg, dataset)
        assert all(row["clustering"] == 0.0 for row in rows)
        assert all(row["mms"] > 0.0 for row in rows)

    def test_clustering_active_after_start_epoch(self, dataset):
        cfg = small_cfg("ConCluGen", epochs=2, cluster_start_epoch=1)
        ckpt, rows = pretrain(cfg, dataset)
        first_epoch = [r for r in rows if r["epoch"] == 0]
        second_epoch = [r for r in rows if r["epoch"] == 1]
        assert all(r["clustering"] == 0.0 for r in first_epoch)
        assert any(r["clustering"] != 0.0 for r in second_epoch)
        assert ckpt.centroids is not None and len(ckpt.queue) > 0

    def test_determinism_bit_identical_checkpoints(self, dataset):
        cfg = small_cfg("ConClu", epochs=2)
        a, rows_a = pretrain(cfg, dataset)
        b, rows_b = pretrain(cfg, dataset)
        assert tensor_hash(a.params) == tensor_hash(b.params)
        assert rows_a == rows_b

    def test_method_modality_requirements(self, dataset):
        video_only = InMemoryDataset(
            splits={"train": Split(ids=["a", "b", "c", "d"],
                                   features={"video": np.zeros((4, 18), dtype=F32)})},
            modality_dims={"video": 18})
        with pytest.raises(ContractError, match="text"):
            pretrain(small_cfg("MultiCont", batch_size=2), video_only)
        # InstanceCont is happy with video only
        cfg = small_cfg("InstanceCont", epochs=1, batch_size=2)
        ckpt, rows = pretrain(cfg, video_only)
        assert rows and all(r["info_nce"] >= 0.0 for r in rows)

    def test_batch_size_larger_than_split_rejected(self, dataset):
        with pytest.raises(ConfigError):
            pretrain(small_cfg(batch_size=4096), dataset)

    def test_log_columns_complete(self, dataset, tmp_path):
        cfg = small_cfg("ConGen", epochs=1)
        _, rows = pretrain(cfg, dataset)
        for row in rows:
            assert set(row) == {"epoch", "step", "lr", "total", "mms", "clustering",
                                "reconstruction", "info_nce"}
            assert row["clustering"] == 0.0 and row["info_nce"] == 0.0
        write_run_log(rows, tmp_path / "log.csv")
        text = (tmp_path / "log.csv").read_text().splitlines()
        assert text[0] == "epoch,step,lr,total,mms,clustering,reconstruction,info_nce"
        assert len(text) == len(rows) + 1


class TestLossRouting:
    def _grads_by_head(self, dataset, method, **over):
        cfg = small_cfg(method, epochs=1, cluster_start_epoch=0, **over)
        split = dataset.read_split("train")
        bundle = ModelBundle(dataset.modality_dims, cfg.representation_dim,
                             cfg.projection_dim, cfg.cluster_dim, cfg.seed,
                             method=method)
        # one explicit step mirroring the trainer's routing
        from multissl.losses import (Method, feature_augment, info_nce, mms_total,
                                     recon_loss, clustering_loss, multitask_loss)
        from multissl.clustering import fuse_multimodal, kmeans_fit, assign
        m = Method.parse(method)
        feats = {mod: Tensor.leaf(split.features[mod][:16])
                 for mod in m.required_modalities}
        reps = bundle.encode(feats)
        parts = {}
        projections = None
        if m.uses_info_nce:
            aug = feature_augment(reps["video"], 0, 0.1, 0.1)
            parts["info_nce"] = info_nce(bundle.projection["video"](reps["video"]),
                                         bundle.projection["video"](aug), 0.1)
        if m.uses_mms:
            projections = bundle.project(reps)
            parts["mms"] = mms_total(projections, 0.001)
        if m.uses_reconstruction:
            rec, _ = recon_loss(feats, bundle.decode(reps))
            parts["reconstruction"] = rec
        if m.uses_clustering:
            embeds = bundle.cluster_embed(projections)
            fused = fuse_multimodal(embeds)
            state, _ = kmeans_fit(fused.data, 4, seed=0)
            labels = assign(fused.data, state.centroids)
            parts["clustering"] = clustering_loss(fused, labels, state.centroids,
                                                  0.001)
        total, _ = multitask_loss(m, **parts)
        ad.backward(total)
        return bundle

    @pytest.mark.parametrize("method,decoders_used,projections_used", [
        ("ConClu", False, True),
        ("ConGen", True, True),
        ("ConCluGen", True, True),
        ("MultiCont", False, True),
        ("Generative", True, False),
    ])
    def test_exact_components_touch_parameters(self, dataset, method,
                                               decoders_used, projections_used):
        bundle = self._grads_by_head(dataset, method)
        for mod in bundle.modalities:
            dec_any = any(p.grad.any() for p in bundle.decoder[mod].params)
            proj_any = any(p.grad.any() for p in bundle.projection[mod].params)
            rep_any = any(p.grad.any() for p in bundle.representation[mod].params)
            assert dec_any == decoders_used, (method, mod, "decoder")
            assert proj_any == projections_used, (method, mod, "projection")
            assert rep_any, (method, mod, "representation")

    def test_clustering_component_reaches_all_representation_heads(self, dataset):
        from multissl.losses import clustering_loss
        from multissl.clustering import fuse_multimodal, kmeans_fit, assign
        split = dataset.read_split("train")
        bundle = ModelBundle(dataset.modality_dims, 16, 8, 8, seed=0)
        feats = {m: Tensor.leaf(split.features[m][:16]) for m in bundle.modalities}
        reps = bundle.encode(feats)
        embeds = bundle.cluster_embed(bundle.project(reps))
        fused = fuse_multimodal(embeds)
        state, _ = kmeans_fit(fused.data, 4, seed=0)
        loss = clustering_loss(fused, assign(fused.data, state.centroids),
                               state.centroids, 0.001)
        ad.backward(loss)
        for m in bundle.modalities:
            assert any(p.grad.any() for p in bundle.representation[m].params), m

    def test_instance_cont_leaves_other_modalities_untouched(self, dataset):
        bundle = self._grads_by_head(dataset, "InstanceCont")
        for m in ("text", "audio"):
            for p in bundle.representation[m].params:
                assert not p.grad.any()
            for p in bundle.projection[m].params:
                assert not p.grad.any()
        assert any(p.grad.any() for p in bundle.projection["video"].params)


class TestCheckpointIO:
    def test_save_load_forward_bit_exact(self, dataset, tmp_path):
        ckpt, _ = pretrain(small_cfg("MultiCont", epochs=1), dataset)
        path = tmp_path / "model.ckpt"
        save_checkpoint(ckpt, path)
        loaded = load_checkpoint(path)
        assert loaded.method == "MultiCont"
        assert tensor_hash(loaded.params) == tensor_hash(ckpt.params)
        split = dataset.read_split("test")
        x = {m: split.features[m][:8] for m in ("video", "text", "audio")}
        out_a = _bundle_from_checkpoint(ckpt).encode(x)
        out_b = _bundle_from_checkpoint(loaded).encode(x)
        for m in out_a:
            assert np.array_equal(out_a[m].data, out_b[m].data)

    def test_save_is_byte_deterministic(self, dataset, tmp_path):
        ckpt, _ = pretrain(small_cfg("ConCluGen", epochs=2, cluster_start_epoch=1),
                           dataset)
        save_checkpoint(ckpt, tmp_path / "a.ckpt")
        save_checkpoint(ckpt, tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_resume_matches_uninterrupted_run(self, dataset, tmp_path):
        full_cfg = small_cfg("ConCluGen", epochs=5, cluster_start_epoch=2)
        full_ckpt, full_rows = pretrain(full_cfg, dataset)

        part_ckpt, part_rows = pretrain(full_cfg, dataset, stop_after_epoch=3)
        assert part_ckpt.epochs_completed == 3
        path = tmp_path / "part.ckpt"
        save_checkpoint(part_ckpt, path)
        resumed_ckpt, resumed_rows = pretrain(full_cfg, dataset,
                                              resume_from=load_checkpoint(path))
        assert tensor_hash(resumed_ckpt.params) == tensor_hash(full_ckpt.params)
        assert part_rows + resumed_rows == full_rows

    def test_wrong_version_rejected(self, dataset, tmp_path):
        ckpt, _ = pretrain(small_cfg("MultiCont", epochs=1), dataset)
        path = tmp_path / "v0.ckpt"
        save_checkpoint(ckpt, path)
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
        meta["format_version"] = 0
        with zipfile.ZipFile(path, "w") as zf:
            zf.writestr("meta.json", json.dumps(meta))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_missing_method_rejected(self, dataset, tmp_path):
        ckpt, _ = pretrain(small_cfg("MultiCont", epochs=1), dataset)
        path = tmp_path / "nm.ckpt"
        save_checkpoint(ckpt, path)
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
        del meta["method"]
        with zipfile.ZipFile(path, "w") as zf:
            zf.writestr("meta.json", json.dumps(meta))
        with pytest.raises(CheckpointError, match="method"):
            load_checkpoint(path)

    def test_corrupt_tensor_header_rejected(self, dataset, tmp_path):
        ckpt, _ = pretrain(small_cfg("MultiCont", epochs=1), dataset)
        path = tmp_path / "corrupt.ckpt"
        save_checkpoint(ckpt, path)
        with zipfile.ZipFile(path) as zf:
            entries = {n: zf.read(n) for n in zf.namelist()}
        victim = next(n for n in entries if n.startswith("tensors/"))
        entries[victim] = b"XXXX" + entries[victim][4:]
        with zipfile.ZipFile(path, "w") as zf:
            for n, payload in entries.items():
                zf.writestr(n, payload)
        with pytest.raises(CheckpointError, match="corrupt"):
            load_checkpoint(path)

    def test_resume_config_mismatch_rejected(self, dataset, tmp_path):
        ckpt, _ = pretrain(small_cfg("MultiCont", epochs=1), dataset)
        other = small_cfg("MultiCont", epochs=3, representation_dim=32)
        with pytest.raises(CheckpointError, match="representation_dim"):
            pretrain(other, dataset, resume_from=ckpt)

    def test_not_a_zip_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"garbage")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


@pytest.fixture(scope="module")
def pretrained(dataset):
    ckpt, _ = pretrain(small_cfg("MultiCont", epochs=3, lr=2e-3), dataset)
    return ckpt


class TestDownstream:
    def test_linear_eval_freezes_encoders(self, dataset, pretrained):
        dcfg = DownstreamConfig(mode="linear_eval", epochs=3, lr=0.05, seed=0)
        bundle, report = attach_probe_and_train(pretrained, dataset, dcfg)
        encoder_tensors = {name: p.value.data for name, p in
                           bundle.named_parameters().items()
                           if not name.startswith("classifier")}
        assert tensor_hash(encoder_tensors) == tensor_hash(pretrained.params)
        assert 0.0 <= report.weighted_accuracy <= 1.0

    def test_finetune_moves_encoders(self, dataset, pretrained):
        dcfg = DownstreamConfig(mode="finetune", epochs=2, lr=0.01, seed=0)
        bundle, _ = attach_probe_and_train(pretrained, dataset, dcfg)
        rep_tensors = {name: p.value.data for name, p in
                       bundle.named_parameters().items() if name.startswith("repr.")}
        before = {k: v for k, v in pretrained.params.items() if k.startswith("repr.")}
        assert tensor_hash(rep_tensors) != tensor_hash(before)

    def test_scratch_ignores_checkpoint_weights(self, dataset, pretrained):
        dcfg = DownstreamConfig(mode="supervised_scratch", epochs=1, seed=1)
        bundle, _ = attach_probe_and_train(pretrained, dataset, dcfg)
        # no head tensor should coincide with the checkpoint values
        fresh = {name: p.value.data for name, p in bundle.named_parameters().items()
                 if name.startswith("proj.")}
        prev = {k: v for k, v in pretrained.params.items() if k.startswith("proj.")}
        assert tensor_hash(fresh) != tensor_hash(prev)

    def test_vision_only_probe_dim(self, dataset, pretrained):
        dcfg = DownstreamConfig(mode="linear_eval", fusion="vision_only", epochs=1)
        bundle, _ = attach_probe_and_train(pretrained, dataset, dcfg)
        assert bundle.classifier.in_dim == bundle.representation_dim

    def test_probe_beats_chance_on_easy_data(self, dataset, pretrained):
        dcfg = DownstreamConfig(mode="linear_eval", epochs=12, lr=0.05, seed=0)
        _, report = attach_probe_and_train(pretrained, dataset, dcfg)
        assert report.weighted_accuracy > 0.5   # 3 balanced classes, rho=0.9

    def test_task_type_mismatch_rejected(self, dataset, pretrained):
        dcfg = DownstreamConfig(mode="linear_eval", task_type="multi_label")
        with pytest.raises(ContractError):
            attach_probe_and_train(pretrained, dataset, dcfg)

    def test_multilabel_protocol(self, tmp_path, pretrained):
        cfg = SynthConfig(n_samples=120, n_classes=3, latent_dim=8,
                          modality_dims={"video": 18, "text": 12, "audio": 15},
                          cross_modal_correlation=0.9, multi_label=True, seed=1)
        ml_data = synth_generate(cfg, tmp_path / "ml")
        dcfg = DownstreamConfig(mode="linear_eval", epochs=4, lr=0.05,
                                threshold=0.5)
        _, report = attach_probe_and_train(pretrained, ml_data, dcfg)
        assert report.task_type == "multi_label"
        assert report.per_class_confusion is not None

    def test_determinism(self, dataset, pretrained):
        dcfg = DownstreamConfig(mode="linear_eval", epochs=2, lr=0.05, seed=3)
        _, r1 = attach_probe_and_train(pretrained, dataset, dcfg)
        _, r2 = attach_probe_and_train(pretrained, dataset, dcfg)
        assert r1.weighted_accuracy == r2.weighted_accuracy
        assert np.array_equal(r1.confusion, r2.confusion)
