"""The seven module combinations used for ablations, their sizes and their feature taps.

Run: python3 demos/06_ablation_groups.py
"""
from spmamba.model import ABLATION_GROUPS, ModelConfig, build_model

print("group  mamba  psa    sppelan  params")
for g, (mamba, psa, spp) in ABLATION_GROUPS.items():
    n = build_model(ModelConfig.for_group(g), 0).num_parameters()
    print(f"{g:5d}  {mamba!s:5s}  {psa!s:5s}  {spp!s:7s}  {n:,}")

# Feature maps that dump-features can export, in forward order.
model = build_model(ModelConfig(), 0)
print("feature inventory:", ", ".join(f"{i}:{name}" for i, name in enumerate(model.feature_inventory())))
