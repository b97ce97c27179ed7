import pytest

from protofssl import cost
from protofssl.cost import (METHODS, RESNET8, RESNET9, ArchSpec, Conv, CostParams, Dense, Pool,
                            comm_cost, comp_cost, forward_flops, param_count, table2_params)


def test_resnet_parameter_counts():
    assert param_count(RESNET8) == 6_563_520
    assert param_count(RESNET9) == 6_568_640


def test_single_layer_counts():
    assert param_count(ArchSpec("c", (Conv("c", 3, 3, 64),))) == 1728
    assert param_count(ArchSpec("d", (Dense("d", 512, 10),))) == 5120
    assert forward_flops(ArchSpec("d", (Dense("d", 512, 10),))) == 10240
    assert param_count(ArchSpec("empty")) == 0
    assert forward_flops(ArchSpec("empty")) == 0


def test_conv_flops_scale_with_extent():
    arch = ArchSpec("c", (Conv("c", 3, 3, 64),))
    assert forward_flops(arch, 32) == 2 * 1728 * 32 * 32
    assert forward_flops(arch, 16) * 4 == forward_flops(arch, 32)


def test_resnet_spatial_trace_and_flops():
    assert RESNET9.spatial_trace(32)[-2:] == [1, 1]
    assert forward_flops(RESNET9, 32) == 758_523_904
    assert forward_flops(RESNET9, 32) - forward_flops(RESNET8, 32) == 10240


def test_pool_rejects_incompatible_extent():
    with pytest.raises(ValueError, match="MaxPool"):
        RESNET9.spatial_trace(36)


def test_table2_values():
    p = table2_params()
    assert comm_cost("protofssl", p) / 1e6 == pytest.approx(52.6, rel=0.01)
    assert comm_cost("fedmatch", p) / 1e6 == pytest.approx(115.6, rel=0.01)
    assert comp_cost("protofssl", p) / 1e9 == pytest.approx(447.9, rel=0.02)
    assert comp_cost("fedmatch", p) / 1e9 == pytest.approx(1526.0, rel=0.02)
    assert comp_cost("mixmatch_fedavg", p) / 1e9 == pytest.approx(782.0, rel=0.02)


def test_no_unlabeled_data_collapses_protofssl_overhead():
    p = table2_params().with_(n_unlabeled=0, helpers=0)
    assert comp_cost("protofssl", p) == p.F * p.n_labeled * 2
    assert comm_cost("protofssl", p) == 2 * p.theta_bytes + p.proto_bytes * p.n_classes


def test_orderings_and_monotonicity():
    p = table2_params()
    assert comm_cost("protofssl", p) < comm_cost("fedmatch", p)
    assert comp_cost("protofssl", p) < comp_cost("fixmatch_fedavg_or_fedrgd", p) < comp_cost("fedmatch", p)
    for m in METHODS:
        for field in ("n_unlabeled", "n_labeled", "epochs", "helpers"):
            bigger = p.with_(**{field: getattr(p, field) * 2 + 1})
            assert comp_cost(m, bigger) >= comp_cost(m, p)
            assert comm_cost(m, bigger) >= comm_cost(m, p)
    assert comm_cost("fedmatch", p.with_(helper_interval=1)) > comm_cost("fedmatch", p)


def test_unknown_method_and_bad_params():
    p = table2_params()
    with pytest.raises(ValueError, match="unknown method"):
        comp_cost("fedsgd", p)
    with pytest.raises(ValueError, match="unknown method"):
        comm_cost("fedsgd", p)
    with pytest.raises(ValueError):
        CostParams(F=-1, theta_bytes=0, proto_bytes=0, n_labeled=0, n_unlabeled=0)
    with pytest.raises(ValueError):
        p.with_(epochs=0)


def test_mlp_arch_and_table_format():
    arch = cost.mlp_arch([16, 64, 16])
    assert param_count(arch) == 16 * 64 + 64 * 16
    text = cost.format_cost_table(table2_params())
    assert "ProtoFSSL" in text and "FedMatch" in text
    assert len(cost.cost_table(table2_params())) == len(METHODS)


def test_pool_layers_are_free():
    arch = ArchSpec("p", (Conv("c", 3, 1, 1), Pool("p", 2, 2), Conv("c2", 3, 1, 1)))
    assert forward_flops(arch, 4) == 2 * 9 * 16 + 2 * 9 * 4
