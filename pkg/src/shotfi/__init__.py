"""Source-free adaptation for Wi-Fi CSI activity recognition with set-valued
multi-user outputs, plus a synthetic multipath benchmark."""

from .csi import CsiTensor, DomainDescriptor, PaddedLabelVector, Sample, pad_label_set
from .matching import build_cost_matrix, hungarian, matched_cross_entropy
from .metrics import MetricReport, multiuser_report, singleuser_report

__version__ = "0.1.0"
