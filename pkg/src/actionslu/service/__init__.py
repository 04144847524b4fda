"""HTTP service layer: pydantic schemas plus the FastAPI application."""
