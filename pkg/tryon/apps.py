from django.apps import AppConfig


class TryonConfig(AppConfig):
    name = "tryon"
    verbose_name = "Video try-on DiT"
    default_auto_field = "django.db.models.AutoField"
