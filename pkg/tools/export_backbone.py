"""Export an ImageNet-pretrained torchvision classifier as a feature-only ONNX file.

The classification head is replaced by an identity, so the graph ends at the
global-pooled embedding (2048-d for ResNet50). The result is what
``mammo-age extract --extractor backbone --model FILE`` expects: a float32
NCHW input of shape (N, 3, 224, 224).

    python3 tools/export_backbone.py --arch resnet50 --out resnet50.onnx

Needs torch, torchvision and onnx (``pip install .[export]``). Pretrained
weights are downloaded by torchvision on first use; ``--no-weights`` exports a
randomly initialised network, useful only for plumbing tests.
"""
import argparse

import torch
import torchvision


def build(arch: str, pretrained: bool) -> torch.nn.Module:
    weights = "DEFAULT" if pretrained else None
    net = getattr(torchvision.models, arch)(weights=weights)
    if hasattr(net, "fc"):
        net.fc = torch.nn.Identity()
    elif hasattr(net, "classifier"):
        net.classifier = torch.nn.Identity()
    else:
        raise SystemExit(f"don't know how to strip the head of {arch}")
    return net.eval()


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--arch", default="resnet50")
    ap.add_argument("--out", required=True)
    ap.add_argument("--no-weights", action="store_true")
    ap.add_argument("--opset", type=int, default=17)
    args = ap.parse_args()

    net = build(args.arch, not args.no_weights)
    dummy = torch.zeros(1, 3, 224, 224)
    with torch.no_grad():
        d = net(dummy).shape[1]
    torch.onnx.export(net, dummy, args.out, input_names=["input"], output_names=["features"],
                      dynamic_axes={"input": {0: "n"}, "features": {0: "n"}},
                      opset_version=args.opset, dynamo=False)
    print(f"wrote {args.out}: {args.arch}, {d}-d features")


if __name__ == "__main__":
    main()
