"""Dense depth SLAM with complex-step derivatives of every stage.

Modules: ``csfd`` (perturbed arithmetic), ``se3``, ``frames``, ``tsdf``,
``icp``, ``surfel``, ``reloc``, ``taskgrad`` and the ``cli`` harness, plus
``synth``, ``dataset``, ``metrics``, ``pipeline`` and ``plotting``.
"""

__version__ = "0.1.0"
