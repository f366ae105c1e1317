"""Desk-scale simulation of an attested, encrypted ML deployment pipeline.

Subsystems: protected file containers (pfs), manifest signing and
measurement (manifest), a mock attestation PKI (attestation, pcs_service),
an attestation-bound secure channel (channel), a policy-gated key server
(provisioning), and a simulated enclave host plus end-to-end demo
(enclave, workflow).
"""

__version__ = "0.1.0"
