from fastapi import APIRouter, Depends

from ephpub.dependencies import get_uploaded_epo
from ephpub.services.epo_core import EpoObject, epo_overhead_bytes, render_epo

router = APIRouter()


@router.post("/inspect")
async def inspect_epo(epo: EpoObject = Depends(get_uploaded_epo)):
    """
    Header fields, overhead and a text rendering of an uploaded .epo file.
    Nothing is queried: reading the key stays with the command-line tool.
    """
    return {
        "version": epo.version,
        "key_bits": epo.key_bits,
        "expiry": epo.expiry,
        "ciphertext_bytes": len(epo.ciphertext),
        "cells": len(epo.cells),
        "data_cells": len(epo.data_cells),
        "parity_cells": len(epo.parity_cells),
        "overhead_bytes": epo_overhead_bytes(epo),
        "rendering": render_epo(epo),
    }
