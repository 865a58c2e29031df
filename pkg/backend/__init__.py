from backend.models import Settings

settings = Settings()
