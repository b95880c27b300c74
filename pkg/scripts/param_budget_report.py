"""
Parameter budgets of the bundled manifests.
Prints the dense fine-tuning and LoRA counts for every manifest shipped in config/manifests.
"""

import sys
import os

# Add src directory to path for imports
sys.path.append(os.path.join(os.path.dirname(__file__), '..', 'src'))

from adapter import SuperLoraConfig, count_params
from grouping import WeightManifest, bundled_manifest_path


LORA_RANKS = (1, 2, 4, 8, 16, 32)


def param_budget_report(names=("vit_base_qv", "unet_qv")):
    """Print the budgets of each bundled manifest."""
    dense = SuperLoraConfig(group_mode="weight-wise", order=1, rank=1)

    print("Parameter Budgets:")
    print("=" * 50)

    for name in names:
        manifest = WeightManifest.load(bundled_manifest_path(name))
        print(f"{name}:")
        print(f"  Weights: {len(manifest)}")
        print(f"  Dense FT: {count_params(dense, manifest):,}")
        for rank in LORA_RANKS:
            lora = SuperLoraConfig(group_mode="weight-wise", order=2, rank=rank, alpha=float(rank))
            print(f"  LoRA r={rank}: {count_params(lora, manifest):,}")
        print()


if __name__ == "__main__":
    param_budget_report()
