"""Vision-language pose estimation at desk scale.

A from-scratch stack: autodiff tensor core, prompt-tunable image encoder,
text-prompt relation matcher, two-branch pose decoder family, keypoint
codec, OKS evaluation and a training harness with a synthetic two-domain
dataset generator.
"""

__version__ = "0.1.0"
