"""AAM-Softmax: how the angular margin shapes the speaker loss.

    python3 demos/03_aam_softmax.py
"""

import torch
import torch.nn.functional as F

from diffsv.objectives import AamHead, aam_softmax_loss

torch.manual_seed(0)
v = torch.randn(6, 16, dtype=torch.float64)
w = torch.randn(4, 16, dtype=torch.float64)
labels = torch.tensor([0, 1, 2, 3, 0, 1])

cos = F.normalize(v, dim=1) @ F.normalize(w, dim=1).T
print("m=0, s=1 equals cross-entropy over cosines:",
      float(aam_softmax_loss(v, labels, w, s=1.0, m=0.0)), float(F.cross_entropy(cos, labels)))
print("rescaling embeddings leaves the loss unchanged:",
      float(aam_softmax_loss(v, labels, w)), float(aam_softmax_loss(3 * v, labels, w)))
for m in (0.0, 0.1, 0.2, 0.3, 0.5):
    print(f"margin {m:.1f}: loss {float(aam_softmax_loss(v, labels, w, m=m)):.3f}")

head = AamHead(4, 16)
opt = torch.optim.Adam(head.parameters(), lr=0.01)
anchors = torch.randn(4, 16)
for step in range(201):
    x = anchors[labels] + 1.0 * torch.randn(6, 16)
    loss = head(x, labels)
    opt.zero_grad()
    loss.backward()
    opt.step()
    if step % 50 == 0:
        print(f"step {step:3d}: head-only training loss {loss.item():.3f}")
