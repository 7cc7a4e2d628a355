from fastapi import File, HTTPException, UploadFile, status

from ephpub.exceptions import ParseError
from ephpub.services.analysis import MAX_ENTROPY_BITS
from ephpub.services.epo_core import EpoObject, epo_parse, is_wrapped
from ephpub.services.rs6355 import stored_bits_for

# Largest .epo accepted by the API: 1 MB of ciphertext plus cells
MAX_EPO_SIZE = 1024 * 1024 + 64 * 1024

# ========== ANALYSIS PARAMETERS ==========

async def validate_key_length(n: int = 128) -> int:
    """Key length for the Hamming-weight estimate"""
    if not 1 <= n <= MAX_ENTROPY_BITS:
        raise HTTPException(
            status_code=status.HTTP_400_BAD_REQUEST,
            detail=f"n must be between 1 and {MAX_ENTROPY_BITS}"
        )
    return n


async def validate_collision_params(n_docs: int, resolvers: int = 25000, domains: int = 1000000) -> dict:
    if n_docs < 1 or resolvers < 1 or domains < 1:
        raise HTTPException(
            status_code=status.HTTP_400_BAD_REQUEST,
            detail="n_docs, resolvers and domains must be positive"
        )
    return {"n_docs": n_docs, "resolvers": resolvers, "domains_in_bucket": domains}


async def validate_codeword_weight(weight: int) -> int:
    cells = stored_bits_for()
    if not 0 <= weight <= cells:
        raise HTTPException(
            status_code=status.HTTP_400_BAD_REQUEST,
            detail=f"weight must be between 0 and {cells}"
        )
    return weight

# ========== EPO UPLOADS ==========

async def get_uploaded_epo(file: UploadFile = File(...)) -> EpoObject:
    """Parse an uploaded .epo file"""
    data = await file.read()
    if len(data) > MAX_EPO_SIZE:
        raise HTTPException(
            status_code=status.HTTP_400_BAD_REQUEST,
            detail=f"File too large. Maximum size is {MAX_EPO_SIZE // 1024}KB"
        )
    if is_wrapped(data):
        raise HTTPException(
            status_code=status.HTTP_400_BAD_REQUEST,
            detail="EPO is wrapped for a recipient; unwrap it locally first"
        )
    try:
        return epo_parse(data)
    except ParseError as exc:
        raise HTTPException(
            status_code=status.HTTP_400_BAD_REQUEST,
            detail={"error": str(exc), "position": exc.position}
        )
