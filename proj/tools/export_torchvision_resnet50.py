#!/usr/bin/env python3
"""Write torchvision's ImageNet ResNet50 weights as a meshpop weight archive.

Usage: export_torchvision_resnet50.py OUT.safetensors [--weights IMAGENET1K_V1 | none]

Requires torch, torchvision and safetensors. The output keeps torchvision's
tensor names; set paths.weights in the pipeline config to the output file.
"""

import argparse

import torch
import torchvision
from safetensors.torch import save_file


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out")
    ap.add_argument("--weights", default="IMAGENET1K_V1")
    args = ap.parse_args()

    weights = None if args.weights.lower() == "none" else args.weights
    model = torchvision.models.resnet50(weights=weights)
    tensors = {
        name: t.detach().to(torch.float32).contiguous()
        for name, t in model.state_dict().items()
        if not name.endswith("num_batches_tracked")
    }
    save_file(tensors, args.out, metadata={"source": "torchvision", "weights": args.weights})
    print(f"wrote {len(tensors)} tensors to {args.out}")


if __name__ == "__main__":
    main()
